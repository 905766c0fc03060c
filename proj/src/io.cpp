#include "kcap/io.hpp"

#include <bit>
#include <cinttypes>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "kcap/error.hpp"

namespace kcap {

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
    return buf;
}

uint64_t parse_hex64(const std::string& s) {
    require(!s.empty() && s.size() <= 16, ErrorCode::IoError, "bad hex field '" + s + "'");
    uint64_t v = 0;
    for (char ch : s) {
        int d;
        if (ch >= '0' && ch <= '9') d = ch - '0';
        else if (ch >= 'a' && ch <= 'f') d = ch - 'a' + 10;
        else if (ch >= 'A' && ch <= 'F') d = ch - 'A' + 10;
        else throw Error(ErrorCode::IoError, "bad hex field '" + s + "'");
        v = (v << 4) | static_cast<uint64_t>(d);
    }
    return v;
}

uint64_t fnv64(std::string_view bytes) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorCode::IoError, "cannot open '" + path + "' for reading");
    std::ostringstream out;
    out << in.rdbuf();
    require(!in.bad(), ErrorCode::IoError, "read failed on '" + path + "'");
    return out.str();
}

void write_text_file(const std::string& path, std::string_view content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorCode::IoError, "cannot open '" + path + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    require(out.good(), ErrorCode::IoError, "write failed on '" + path + "'");
}

std::vector<std::string> read_lines(const std::string& path) {
    const std::string text = read_text_file(path);
    std::vector<std::string> lines;
    size_t start = 0;
    while (start < text.size()) {
        size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        lines.emplace_back(text.substr(start, end - start));
        start = end + 1;
    }
    return lines;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::string text;
    for (const std::string& l : lines) {
        text += l;
        text += '\n';
    }
    write_text_file(path, text);
}

namespace {

constexpr char kMagic[8] = {'K', 'C', 'A', 'P', 'M', 'A', 'T', '1'};

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) {
    const uint64_t v = std::bit_cast<uint64_t>(d);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n, const char* what) {
        require(pos + n <= buf.size(), ErrorCode::IoError, std::string("matrix container truncated in ") + what);
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
        return v;
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<uint8_t>(buf[pos++]);
    }
    double f64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
        return std::bit_cast<double>(v);
    }
    std::string bytes(size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

void write_mat_container(const std::string& path, const std::vector<NamedMat>& mats) {
    std::string out(kMagic, sizeof kMagic);
    put_u32(out, 1);
    put_u32(out, static_cast<uint32_t>(mats.size()));
    for (const NamedMat& m : mats) {
        require(!m.se.has_value() || m.se->same_shape(m.value), ErrorCode::ShapeMismatch,
                "matrix container: stderr shape differs from values for '" + m.name + "'");
        put_u32(out, static_cast<uint32_t>(m.name.size()));
        out += m.name;
        put_u32(out, static_cast<uint32_t>(m.value.rows()));
        put_u32(out, static_cast<uint32_t>(m.value.cols()));
        out.push_back(m.se.has_value() ? 1 : 0);
        for (int c = 0; c < m.value.cols(); ++c)
            for (int r = 0; r < m.value.rows(); ++r) put_f64(out, m.value(r, c));
        if (m.se.has_value())
            for (int c = 0; c < m.value.cols(); ++c)
                for (int r = 0; r < m.value.rows(); ++r) put_f64(out, (*m.se)(r, c));
    }
    write_text_file(path, out);
}

std::vector<NamedMat> read_mat_container(const std::string& path) {
    const std::string buf = read_text_file(path);
    ByteReader rd{buf};
    require(rd.bytes(sizeof kMagic, "magic") == std::string(kMagic, sizeof kMagic), ErrorCode::IoError,
            "'" + path + "' is not a matrix container (bad magic)");
    const uint32_t version = rd.u32("version");
    require(version == 1, ErrorCode::IoError, "unsupported matrix container version " + std::to_string(version));
    const uint32_t count = rd.u32("count");

    std::vector<NamedMat> mats;
    mats.reserve(count);
    for (uint32_t k = 0; k < count; ++k) {
        NamedMat m;
        const uint32_t name_len = rd.u32("name length");
        m.name = rd.bytes(name_len, "name");
        const uint32_t rows = rd.u32("rows");
        const uint32_t cols = rd.u32("cols");
        require(rows >= 1 && cols >= 1 && static_cast<uint64_t>(rows) * cols <= (1ull << 32), ErrorCode::IoError,
                "matrix container: implausible shape for '" + m.name + "'");
        const bool has_se = rd.u8("stderr flag") != 0;
        m.value = Mat(static_cast<int>(rows), static_cast<int>(cols));
        for (uint32_t c = 0; c < cols; ++c)
            for (uint32_t r = 0; r < rows; ++r)
                m.value(static_cast<int>(r), static_cast<int>(c)) = rd.f64("values");
        if (has_se) {
            Mat se(static_cast<int>(rows), static_cast<int>(cols));
            for (uint32_t c = 0; c < cols; ++c)
                for (uint32_t r = 0; r < rows; ++r) se(static_cast<int>(r), static_cast<int>(c)) = rd.f64("stderrs");
            m.se = std::move(se);
        }
        mats.push_back(std::move(m));
    }
    require(rd.pos == buf.size(), ErrorCode::IoError, "matrix container: trailing bytes after the last matrix");
    return mats;
}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void write_matrix_csv(const std::string& path, const Mat& value, const Mat* se) {
    require(se == nullptr || se->same_shape(value), ErrorCode::ShapeMismatch,
            "matrix csv: stderr shape differs from values");
    std::string out = "row,col,value,stderr\n";
    for (int r = 0; r < value.rows(); ++r)
        for (int c = 0; c < value.cols(); ++c) {
            out += std::to_string(r);
            out += ',';
            out += std::to_string(c);
            out += ',';
            out += fmt_double(value(r, c));
            out += ',';
            if (se != nullptr) out += fmt_double((*se)(r, c));
            out += '\n';
        }
    write_text_file(path, out);
}

NamedMat read_matrix_csv(const std::string& path) {
    const std::vector<std::string> lines = read_lines(path);
    require(!lines.empty() && lines[0] == "row,col,value,stderr", ErrorCode::IoError,
            "matrix csv: missing 'row,col,value,stderr' header in '" + path + "'");
    struct Cell {
        int r, c;
        double v;
        std::optional<double> se;
    };
    std::vector<Cell> cells;
    int max_r = -1, max_c = -1;
    bool any_se = false;
    for (size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        std::vector<std::string> parts;
        size_t start = 0;
        for (int f = 0; f < 3; ++f) {
            const size_t comma = lines[i].find(',', start);
            require(comma != std::string::npos, ErrorCode::IoError,
                    "matrix csv: line " + std::to_string(i + 1) + " needs four fields");
            parts.push_back(lines[i].substr(start, comma - start));
            start = comma + 1;
        }
        parts.push_back(lines[i].substr(start));
        try {
            Cell cell{std::stoi(parts[0]), std::stoi(parts[1]), std::stod(parts[2]), std::nullopt};
            if (!parts[3].empty()) {
                cell.se = std::stod(parts[3]);
                any_se = true;
            }
            require(cell.r >= 0 && cell.c >= 0, ErrorCode::IoError, "matrix csv: negative index");
            max_r = std::max(max_r, cell.r);
            max_c = std::max(max_c, cell.c);
            cells.push_back(cell);
        } catch (const std::exception&) {
            throw Error(ErrorCode::IoError, "matrix csv: unparsable line " + std::to_string(i + 1));
        }
    }
    require(!cells.empty(), ErrorCode::IoError, "matrix csv: no data rows in '" + path + "'");
    require(cells.size() == static_cast<size_t>(max_r + 1) * static_cast<size_t>(max_c + 1), ErrorCode::IoError,
            "matrix csv: cell count does not fill the bounding shape");
    NamedMat out;
    out.value = Mat(max_r + 1, max_c + 1);
    if (any_se) out.se = Mat(max_r + 1, max_c + 1);
    for (const Cell& cell : cells) {
        out.value(cell.r, cell.c) = cell.v;
        if (any_se) (*out.se)(cell.r, cell.c) = cell.se.value_or(0.0);
    }
    return out;
}

std::string manifest_to_json(const RunManifest& m) {
    nlohmann::json j;
    j["format"] = "kcap-manifest";
    j["version"] = m.format_version;
    j["tool"] = m.tool;
    j["config_hash"] = hex64(m.config_hash);
    j["master_seed"] = hex64(m.master_seed);
    j["created_utc"] = m.created_utc;
    j["outputs"] = m.outputs;
    return j.dump(2) + "\n";
}

RunManifest manifest_from_json(const std::string& text) {
    try {
        const nlohmann::json j = nlohmann::json::parse(text);
        require(j.at("format").get<std::string>() == "kcap-manifest", ErrorCode::IoError,
                "not a manifest (wrong format tag)");
        RunManifest m;
        m.format_version = j.at("version").get<int>();
        m.tool = j.at("tool").get<std::string>();
        m.config_hash = parse_hex64(j.at("config_hash").get<std::string>());
        m.master_seed = parse_hex64(j.at("master_seed").get<std::string>());
        m.created_utc = j.at("created_utc").get<std::string>();
        m.outputs = j.at("outputs").get<std::vector<std::string>>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::IoError, std::string("manifest json: ") + e.what());
    }
}

std::string utc_timestamp_now() {
    const std::time_t now = std::time(nullptr);
    std::tm tm_utc{};
    gmtime_r(&now, &tm_utc);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

}  // namespace kcap
