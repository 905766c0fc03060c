#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kcap/mat.hpp"

namespace kcap {

// File formats shared by the command-line tools: whole-file text helpers, a
// named-matrix binary container, matrix CSV, and the run manifest. All
// failures throw Error(IoError, ...).

// Fixed-width lowercase hex encoding used wherever 64-bit seeds or hashes
// appear in text formats.
std::string hex64(uint64_t v);
uint64_t parse_hex64(const std::string& s);

// FNV-1a over raw bytes; the config-hash function for manifests.
uint64_t fnv64(std::string_view bytes);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, std::string_view content);
std::vector<std::string> read_lines(const std::string& path);
void write_lines(const std::string& path, const std::vector<std::string>& lines);

// Named-matrix container. Layout, all integers little-endian:
//   bytes 0-7  magic "KCAPMAT1"
//   u32        format version (1)
//   u32        matrix count N
//   N entries: u32 name length, name bytes,
//              u32 rows, u32 cols, u8 has_stderr,
//              rows*cols f64 values in column-major order,
//              rows*cols f64 standard errors when has_stderr = 1.
struct NamedMat {
    std::string name;
    Mat value;
    std::optional<Mat> se;
};
void write_mat_container(const std::string& path, const std::vector<NamedMat>& mats);
std::vector<NamedMat> read_mat_container(const std::string& path);

// CSV with header "row,col,value,stderr"; the stderr column is empty when no
// stderr matrix accompanies the values. Values print with enough digits to
// round-trip doubles exactly.
void write_matrix_csv(const std::string& path, const Mat& value, const Mat* se = nullptr);
NamedMat read_matrix_csv(const std::string& path);

// Run provenance attached to every command output. created_utc is the only
// field that differs between reruns of the same config and seed; tools
// comparing runs byte-wise should compare the data files, not the manifest.
struct RunManifest {
    std::string tool = "kcap";
    int format_version = 1;
    uint64_t config_hash = 0;
    uint64_t master_seed = 0;
    std::string created_utc;
    std::vector<std::string> outputs;
};
std::string manifest_to_json(const RunManifest& m);
RunManifest manifest_from_json(const std::string& text);
std::string utc_timestamp_now();

}  // namespace kcap
