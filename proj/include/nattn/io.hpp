#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "nattn/errors.hpp"
#include "nattn/matrix.hpp"

namespace nattn {

/// Shortest decimal that round-trips a double (%.17g is always sufficient;
/// try shorter first so CSVs stay readable).
inline std::string format_double(double v) {
    char buf[40];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

/// Matrix CSV, used repo-wide: first line "rows,cols", then `rows` lines of
/// `cols` comma-separated decimal floats, '\n' endings.
inline void write_matrix_csv(const Matrix& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path);
    out << m.rows() << "," << m.cols() << "\n";
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            if (j) out << ",";
            out << format_double(m(i, j));
        }
        out << "\n";
    }
    if (!out) throw IoError("write failed: " + path);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

inline double parse_double_field(const std::string& s, const std::string& path) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0')
        throw InvalidInputError("bad numeric field '" + s + "' in " + path);
    return v;
}

inline Matrix read_matrix_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    std::string line;
    if (!std::getline(in, line)) throw InvalidInputError("empty matrix CSV: " + path);
    auto header = split_csv_line(line);
    if (header.size() != 2) throw InvalidInputError("bad header (want rows,cols): " + path);
    const auto rows = static_cast<std::size_t>(parse_double_field(header[0], path));
    const auto cols = static_cast<std::size_t>(parse_double_field(header[1], path));
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        if (!std::getline(in, line)) throw InvalidInputError("truncated matrix CSV: " + path);
        auto fields = split_csv_line(line);
        if (fields.size() != cols)
            throw InvalidInputError("ragged row " + std::to_string(i) + " in " + path);
        for (std::size_t j = 0; j < cols; ++j) m(i, j) = parse_double_field(fields[j], path);
    }
    m.validate_finite();
    return m;
}

/// Binary PGM (P5, maxval 255). values in [0,1] row-major; pixel =
/// round(255 * v).
inline void write_pgm(const std::vector<double>& values, std::size_t width, std::size_t height,
                      const std::string& path) {
    if (values.size() != width * height) throw DimensionError("write_pgm: size != width*height");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path);
    out << "P5\n" << width << " " << height << "\n255\n";
    std::vector<unsigned char> bytes(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        double v = values[i];
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        bytes[i] = static_cast<unsigned char>(std::lround(255.0 * v));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path);
}

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace nattn
