#ifndef HIERPROBE_MATRIX_IO_HPP
#define HIERPROBE_MATRIX_IO_HPP

#include <filesystem>
#include <string>
#include <vector>

namespace hierprobe {

// CSV: first row holds the class labels, then one row per matrix row, full
// double precision (17 significant digits).
void write_matrix_csv(const std::filesystem::path& path, const std::vector<std::string>& labels,
                      const std::vector<double>& values, int rows, int cols);

// 8-bit grayscale PGM (P5). Correlation convention maps [-1, 1] to [0, 255],
// distance/rate convention maps [0, 1] to [0, 255]. Row 0 is the top row.
void write_pgm_signed(const std::filesystem::path& path, const std::vector<double>& values,
                      int rows, int cols);
void write_pgm_unit(const std::filesystem::path& path, const std::vector<double>& values,
                    int rows, int cols);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

} // namespace hierprobe

#endif
