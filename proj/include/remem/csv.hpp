#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "remem/errors.hpp"

namespace remem::csv {

inline std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

class Writer {
 public:
  Writer(const std::string& path, const std::string& header) : path_(path), out_(path) {
    if (!out_) throw IoError("cannot open " + path + " for writing");
    out_ << header << '\n';
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
    if (!out_) throw IoError("write to " + path_ + " failed");
  }

 private:
  std::string path_;
  std::ofstream out_;
};

}  // namespace remem::csv
