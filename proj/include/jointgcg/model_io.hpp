#pragma once

// Plain-text parameter files.
//
//   jointgcg-model 1
//   kind <name>
//   scalar <name> <value>
//   matrix <name> <rows> <cols>
//   <row 0 values, space separated>
//   ...
//   end
//
// Values are written in shortest round-trip decimal form, so a reload is
// bit-identical to what was saved.

#include "jointgcg/core.hpp"

#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace jointgcg {

struct ParameterFile {
  std::string kind;
  std::vector<std::pair<std::string, double>> scalars;
  std::vector<std::pair<std::string, Matrix>> matrices;

  void add_scalar(std::string name, double value) { scalars.emplace_back(std::move(name), value); }
  void add_matrix(std::string name, Matrix value) { matrices.emplace_back(std::move(name), std::move(value)); }

  double scalar(const std::string& name) const {
    for (const auto& [n, v] : scalars) {
      if (n == name) return v;
    }
    fail(ErrorCode::ModelLoadError, "missing scalar '" + name + "' in " + kind + " file");
  }

  double scalar_or(const std::string& name, double fallback) const {
    for (const auto& [n, v] : scalars) {
      if (n == name) return v;
    }
    return fallback;
  }

  const Matrix& matrix(const std::string& name) const {
    for (const auto& [n, m] : matrices) {
      if (n == name) return m;
    }
    fail(ErrorCode::ModelLoadError, "missing matrix '" + name + "' in " + kind + " file");
  }
};

inline void write_parameter_file(std::ostream& out, const ParameterFile& file) {
  out << "jointgcg-model 1\n";
  out << "kind " << file.kind << '\n';
  for (const auto& [name, value] : file.scalars) out << "scalar " << name << ' ' << format_double(value) << '\n';
  for (const auto& [name, m] : file.matrices) {
    out << "matrix " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        if (c > 0) out << ' ';
        out << format_double(m(r, c));
      }
      out << '\n';
    }
  }
  out << "end\n";
}

inline ParameterFile read_parameter_file(std::istream& in) {
  ParameterFile file;
  std::string word;
  if (!(in >> word) || word != "jointgcg-model") fail(ErrorCode::ModelLoadError, "bad header");
  int version = 0;
  if (!(in >> version) || version != 1) fail(ErrorCode::ModelLoadError, "unsupported version");
  while (in >> word) {
    if (word == "end") return file;
    if (word == "kind") {
      in >> file.kind;
    } else if (word == "scalar") {
      std::string name, value;
      if (!(in >> name >> value)) fail(ErrorCode::ModelLoadError, "truncated scalar");
      file.add_scalar(name, parse_double(value));
    } else if (word == "matrix") {
      std::string name;
      Eigen::Index rows = 0, cols = 0;
      if (!(in >> name >> rows >> cols) || rows < 0 || cols < 0) {
        fail(ErrorCode::ModelLoadError, "bad matrix header");
      }
      Matrix m(rows, cols);
      std::string value;
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
          if (!(in >> value)) fail(ErrorCode::ModelLoadError, "truncated matrix '" + name + "'");
          m(r, c) = parse_double(value);
        }
      }
      if (!m.allFinite()) fail(ErrorCode::ModelLoadError, "non-finite entries in '" + name + "'");
      file.add_matrix(name, std::move(m));
    } else {
      fail(ErrorCode::ModelLoadError, "unexpected token '" + word + "'");
    }
  }
  fail(ErrorCode::ModelLoadError, "missing end marker");
}

inline void save_parameter_file(const std::string& path, const ParameterFile& file) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path);
  write_parameter_file(out, file);
}

inline ParameterFile load_parameter_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::ModelLoadError, "cannot open " + path);
  return read_parameter_file(in);
}

}  // namespace jointgcg
