#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <string_view>

namespace sinklab {

// Shortest round-trip decimal form of v ("inf", "-inf", "nan" for non-finite).
std::string format_number(double v);

// Minimal comma-separated writer. Values are written in round-trip precision so
// that reruns with the same seed produce byte-identical files.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, std::initializer_list<std::string_view> header);

  CsvWriter& cell(double v);
  CsvWriter& cell(std::size_t v);
  CsvWriter& cell(bool v);
  CsvWriter& cell(std::string_view v);
  CsvWriter& cell(const char* v) { return cell(std::string_view(v)); }
  void end_row();

 private:
  void separator();

  std::ofstream out_;
  bool row_started_ = false;
};

}  // namespace sinklab
