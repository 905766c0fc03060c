#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "kcap/error.hpp"
#include "kcap/io.hpp"
#include "kcap/rng.hpp"

using namespace kcap;

namespace {

// Fresh scratch directory per test run; files are small and cleaned on entry.
std::string scratch_path(const std::string& leaf) {
    static const std::string dir = [] {
        const std::string d = std::filesystem::temp_directory_path() / "kcap_io_test";
        std::filesystem::remove_all(d);
        std::filesystem::create_directories(d);
        return d;
    }();
    return dir + "/" + leaf;
}

bool bit_equal(const Mat& a, const Mat& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

Mat awkward_mat(int rows, int cols) {
    // Values chosen to break lossy decimal round trips: tiny, huge, negative
    // zero, and irrationals with full mantissas.
    Mat m(rows, cols);
    Rng rng(0x10fULL);
    const double specials[] = {1.0 / 3.0, -0.0, 1e-300, -1.7e308, 6.02214076e23, M_PI, std::nextafter(1.0, 2.0)};
    int k = 0;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            if (k < static_cast<int>(sizeof specials / sizeof specials[0])) m(r, c) = specials[k++];
            else m(r, c) = rng.normal() * std::pow(10.0, rng.range(-30, 30));
        }
    return m;
}

}  // namespace

TEST_CASE("hex64 is fixed-width lowercase and round-trips") {
    CHECK(hex64(0) == "0000000000000000");
    CHECK(hex64(0xdeadbeefULL) == "00000000deadbeef");
    CHECK(hex64(~0ULL) == "ffffffffffffffff");
    Rng rng(7);
    for (int i = 0; i < 200; ++i) {
        const uint64_t v = rng.next_u64();
        CHECK(parse_hex64(hex64(v)) == v);
    }
    CHECK(parse_hex64("DEADBEEF") == 0xdeadbeefULL);  // upper case accepted on input
    CHECK(parse_hex64("7") == 7);                     // short fields allowed
    CHECK_THROWS_AS(parse_hex64(""), Error);
    CHECK_THROWS_AS(parse_hex64("00000000000000000"), Error);  // 17 digits
    CHECK_THROWS_AS(parse_hex64("xyz"), Error);
    CHECK_THROWS_AS(parse_hex64("12 4"), Error);
}

TEST_CASE("fnv64 matches the published FNV-1a test vectors") {
    CHECK(fnv64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv64("foobar") == 0x85944171f73967e8ULL);
    // Sensitive to every byte, including NUL.
    CHECK(fnv64(std::string_view("a\0b", 3)) != fnv64(std::string_view("ab", 2)));
}

TEST_CASE("text files round-trip bytes exactly and report missing paths") {
    const std::string path = scratch_path("text.bin");
    const std::string content("line1\nline2\n\xff\x00 binary tail", 26);
    write_text_file(path, content);
    CHECK(read_text_file(path) == content);

    write_text_file(path, "");  // truncating rewrite
    CHECK(read_text_file(path).empty());

    CHECK_THROWS_WITH_AS(read_text_file(scratch_path("absent.txt")), doctest::Contains("cannot open"), Error);
}

TEST_CASE("line files split on newlines without inventing a trailing entry") {
    const std::string path = scratch_path("lines.txt");
    const std::vector<std::string> lines = {"alpha", "", "gamma,delta", "end"};
    write_lines(path, lines);
    CHECK(read_lines(path) == lines);
    CHECK(read_text_file(path) == "alpha\n\ngamma,delta\nend\n");

    write_text_file(path, "no-final-newline");
    CHECK(read_lines(path) == std::vector<std::string>{"no-final-newline"});
}

TEST_CASE("matrix container round-trips names, shapes, and exact bits") {
    const std::string path = scratch_path("mats.bin");
    NamedMat a{"gram", awkward_mat(5, 3), awkward_mat(5, 3)};
    NamedMat b{"readout", Mat(1, 1), std::nullopt};
    b.value(0, 0) = -0.0;
    NamedMat c{"", awkward_mat(2, 7), std::nullopt};  // empty names are legal
    write_mat_container(path, {a, b, c});

    const std::vector<NamedMat> back = read_mat_container(path);
    REQUIRE(back.size() == 3);
    CHECK(back[0].name == "gram");
    CHECK(bit_equal(back[0].value, a.value));
    REQUIRE(back[0].se.has_value());
    CHECK(bit_equal(*back[0].se, *a.se));
    CHECK(back[1].name == "readout");
    CHECK_FALSE(back[1].se.has_value());
    CHECK(bit_equal(back[1].value, b.value));
    CHECK(back[2].name.empty());
    CHECK(bit_equal(back[2].value, c.value));
}

TEST_CASE("matrix container rejects mismatched stderr shapes on write") {
    NamedMat bad{"x", Mat(2, 2), Mat(2, 3)};
    CHECK_THROWS_AS(write_mat_container(scratch_path("bad.bin"), {bad}), Error);
}

TEST_CASE("matrix container read fails loudly on corruption") {
    const std::string path = scratch_path("corrupt.bin");
    write_mat_container(path, {{"m", awkward_mat(4, 4), std::nullopt}});
    const std::string good = read_text_file(path);

    write_text_file(path, good.substr(0, good.size() - 5));
    CHECK_THROWS_WITH_AS(read_mat_container(path), doctest::Contains("truncated"), Error);

    std::string flipped = good;
    flipped[0] = 'X';
    write_text_file(path, flipped);
    CHECK_THROWS_WITH_AS(read_mat_container(path), doctest::Contains("bad magic"), Error);

    write_text_file(path, good + std::string(1, '\0'));
    CHECK_THROWS_WITH_AS(read_mat_container(path), doctest::Contains("trailing"), Error);

    std::string version_bumped = good;
    version_bumped[8] = 2;
    write_text_file(path, version_bumped);
    CHECK_THROWS_WITH_AS(read_mat_container(path), doctest::Contains("version"), Error);
}

TEST_CASE("matrix csv round-trips doubles exactly through %.17g") {
    const std::string path = scratch_path("m.csv");
    const Mat value = awkward_mat(4, 3);
    const Mat se = awkward_mat(4, 3);

    write_matrix_csv(path, value, &se);
    NamedMat back = read_matrix_csv(path);
    CHECK(bit_equal(back.value, value));
    REQUIRE(back.se.has_value());
    CHECK(bit_equal(*back.se, se));

    write_matrix_csv(path, value);  // no stderr column
    back = read_matrix_csv(path);
    CHECK(bit_equal(back.value, value));
    CHECK_FALSE(back.se.has_value());
}

TEST_CASE("matrix csv read validates header and completeness") {
    const std::string path = scratch_path("bad.csv");

    write_text_file(path, "r,c,v,s\n0,0,1.0,\n");
    CHECK_THROWS_WITH_AS(read_matrix_csv(path), doctest::Contains("header"), Error);

    write_text_file(path, "row,col,value,stderr\n0,0,1.0,\n1,1,2.0,\n");  // hole at (0,1),(1,0)
    CHECK_THROWS_WITH_AS(read_matrix_csv(path), doctest::Contains("bounding"), Error);

    write_text_file(path, "row,col,value,stderr\n0,0,not-a-number,\n");
    CHECK_THROWS_WITH_AS(read_matrix_csv(path), doctest::Contains("unparsable"), Error);

    write_text_file(path, "row,col,value,stderr\n0,0\n");
    CHECK_THROWS_WITH_AS(read_matrix_csv(path), doctest::Contains("four fields"), Error);

    write_text_file(path, "row,col,value,stderr\n");
    CHECK_THROWS_WITH_AS(read_matrix_csv(path), doctest::Contains("no data"), Error);
}

TEST_CASE("manifest json round-trips and pins the format tag") {
    RunManifest m;
    m.config_hash = 0xabcdef0123456789ULL;
    m.master_seed = 42;
    m.created_utc = "2026-08-15T12:00:00Z";
    m.outputs = {"curve.csv", "fit.json"};

    const std::string text = manifest_to_json(m);
    const RunManifest back = manifest_from_json(text);
    CHECK(back.tool == "kcap");
    CHECK(back.format_version == 1);
    CHECK(back.config_hash == m.config_hash);
    CHECK(back.master_seed == m.master_seed);
    CHECK(back.created_utc == m.created_utc);
    CHECK(back.outputs == m.outputs);

    CHECK_THROWS_AS(manifest_from_json("{}"), Error);
    CHECK_THROWS_AS(manifest_from_json("not json"), Error);
    std::string wrong_tag = text;
    const size_t at = wrong_tag.find("kcap-manifest");
    wrong_tag.replace(at, 13, "kcap-samifest");
    CHECK_THROWS_WITH_AS(manifest_from_json(wrong_tag), doctest::Contains("format tag"), Error);
}

TEST_CASE("utc timestamps follow ISO-8601 Zulu form") {
    const std::string ts = utc_timestamp_now();
    REQUIRE(ts.size() == 20);
    CHECK(ts[4] == '-');
    CHECK(ts[7] == '-');
    CHECK(ts[10] == 'T');
    CHECK(ts[13] == ':');
    CHECK(ts[16] == ':');
    CHECK(ts[19] == 'Z');
    CHECK(ts.substr(0, 2) == "20");
}
