#include "sinklab/csv.hpp"

#include <array>
#include <charconv>
#include <cmath>

#include "sinklab/error.hpp"

namespace sinklab {

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

CsvWriter::CsvWriter(const std::filesystem::path& path,
                     std::initializer_list<std::string_view> header)
    : out_(path) {
  if (!out_) throw InvalidArgument("cannot write " + path.string());
  for (std::string_view h : header) cell(h);
  end_row();
}

void CsvWriter::separator() {
  if (row_started_) out_ << ',';
  row_started_ = true;
}

CsvWriter& CsvWriter::cell(double v) {
  separator();
  out_ << format_number(v);
  return *this;
}

CsvWriter& CsvWriter::cell(std::size_t v) {
  separator();
  out_ << v;
  return *this;
}

CsvWriter& CsvWriter::cell(bool v) {
  separator();
  out_ << (v ? "true" : "false");
  return *this;
}

CsvWriter& CsvWriter::cell(std::string_view v) {
  separator();
  out_ << v;
  return *this;
}

void CsvWriter::end_row() {
  out_ << '\n';
  row_started_ = false;
}

}  // namespace sinklab
