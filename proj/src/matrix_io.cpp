#include "hierprobe/matrix_io.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "hierprobe/errors.hpp"
#include "hierprobe/util.hpp"

namespace hierprobe {

void write_matrix_csv(const std::filesystem::path& path, const std::vector<std::string>& labels,
                      const std::vector<double>& values, int rows, int cols) {
    if (static_cast<std::size_t>(rows) * cols != values.size())
        throw ContractError("matrix size does not match rows*cols");
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    for (int j = 0; j < cols; ++j) {
        if (j) os << ",";
        os << (j < static_cast<int>(labels.size()) ? labels[static_cast<std::size_t>(j)]
                                                   : std::to_string(j));
    }
    os << "\n";
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            if (j) os << ",";
            os << format_g17(values[static_cast<std::size_t>(i) * cols + j]);
        }
        os << "\n";
    }
    if (!os) throw FormatError("write failure on " + path.string());
}

namespace {

void write_pgm(const std::filesystem::path& path, const std::vector<unsigned char>& bytes,
               int rows, int cols) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    os << "P5\n" << cols << " " << rows << "\n255\n";
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw FormatError("write failure on " + path.string());
}

unsigned char clamp_byte(double v) {
    long b = std::lround(v);
    if (b < 0) b = 0;
    if (b > 255) b = 255;
    return static_cast<unsigned char>(b);
}

} // namespace

void write_pgm_signed(const std::filesystem::path& path, const std::vector<double>& values,
                      int rows, int cols) {
    std::vector<unsigned char> bytes(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
        bytes[i] = clamp_byte((values[i] + 1.0) / 2.0 * 255.0);
    write_pgm(path, bytes, rows, cols);
}

void write_pgm_unit(const std::filesystem::path& path, const std::vector<double>& values,
                    int rows, int cols) {
    std::vector<unsigned char> bytes(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) bytes[i] = clamp_byte(values[i] * 255.0);
    write_pgm(path, bytes, rows, cols);
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    os << text;
    if (!os) throw FormatError("write failure on " + path.string());
}

} // namespace hierprobe
