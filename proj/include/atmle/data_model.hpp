#pragma once

#include "atmle/core.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace atmle {

struct Observation {
  int s = 1;
  std::vector<double> w;
  int a = 0;
  double y = 0.0;
  std::optional<int> delta;  // absent means the outcome is observed
};

// Observations stored column-wise; read-only after construction.
class FusionDataset {
 public:
  FusionDataset() = default;

  FusionDataset(std::vector<int> s, Matrix w, std::vector<int> a, Vector y,
                std::optional<std::vector<int>> delta = std::nullopt,
                std::optional<bool> external_controls_only = std::nullopt)
      : s_(std::move(s)), w_(std::move(w)), a_(std::move(a)), y_(std::move(y)),
        has_delta_(delta.has_value()) {
    const auto n = static_cast<Eigen::Index>(s_.size());
    if (w_.rows() != n || static_cast<Eigen::Index>(a_.size()) != n || y_.size() != n) {
      throw ValidationError("column lengths disagree");
    }
    delta_ = delta ? std::move(*delta) : std::vector<int>(s_.size(), 1);
    if (static_cast<Eigen::Index>(delta_.size()) != n) {
      throw ValidationError("column lengths disagree");
    }
    validate_values();
    bool has_external_treated = false;
    for (std::size_t i = 0; i < s_.size(); ++i) {
      if (s_[i] == 0 && a_[i] == 1) has_external_treated = true;
    }
    external_controls_only_ = external_controls_only.value_or(!has_external_treated);
    if (external_controls_only_ && has_external_treated) {
      throw ValidationError(
          "external_controls_only set but the external sample contains treated rows");
    }
  }

  static FusionDataset from_observations(const std::vector<Observation>& obs,
                                         std::optional<bool> external_controls_only = std::nullopt) {
    if (obs.empty()) throw ValidationError("empty dataset");
    const auto d = static_cast<Eigen::Index>(obs.front().w.size());
    const auto n = static_cast<Eigen::Index>(obs.size());
    std::vector<int> s(obs.size()), a(obs.size()), delta(obs.size());
    Matrix w(n, d);
    Vector y(n);
    bool any_delta = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& o = obs[static_cast<std::size_t>(i)];
      if (static_cast<Eigen::Index>(o.w.size()) != d) {
        throw ValidationError("observations have inconsistent covariate dimension");
      }
      s[i] = o.s;
      a[i] = o.a;
      y(i) = o.y;
      for (Eigen::Index j = 0; j < d; ++j) w(i, j) = o.w[static_cast<std::size_t>(j)];
      delta[i] = o.delta.value_or(1);
      any_delta = any_delta || o.delta.has_value();
    }
    std::optional<std::vector<int>> dl;
    if (any_delta) dl = std::move(delta);
    return FusionDataset(std::move(s), std::move(w), std::move(a), std::move(y), std::move(dl),
                         external_controls_only);
  }

  [[nodiscard]] Eigen::Index n() const { return static_cast<Eigen::Index>(s_.size()); }
  [[nodiscard]] Eigen::Index d() const { return w_.cols(); }
  [[nodiscard]] int s(Eigen::Index i) const { return s_[static_cast<std::size_t>(i)]; }
  [[nodiscard]] int a(Eigen::Index i) const { return a_[static_cast<std::size_t>(i)]; }
  [[nodiscard]] double y(Eigen::Index i) const { return y_(i); }
  [[nodiscard]] int delta(Eigen::Index i) const { return delta_[static_cast<std::size_t>(i)]; }
  [[nodiscard]] const Matrix& w() const { return w_; }
  [[nodiscard]] const Vector& y() const { return y_; }
  [[nodiscard]] const std::vector<int>& s_column() const { return s_; }
  [[nodiscard]] const std::vector<int>& a_column() const { return a_; }
  [[nodiscard]] const std::vector<int>& delta_column() const { return delta_; }
  [[nodiscard]] bool has_delta() const { return has_delta_; }
  [[nodiscard]] bool external_controls_only() const { return external_controls_only_; }
  [[nodiscard]] bool any_censored() const {
    return std::any_of(delta_.begin(), delta_.end(), [](int v) { return v == 0; });
  }

  [[nodiscard]] Observation observation(Eigen::Index i) const {
    Observation o;
    o.s = s(i);
    o.a = a(i);
    o.y = y(i);
    o.w.resize(static_cast<std::size_t>(d()));
    for (Eigen::Index j = 0; j < d(); ++j) o.w[static_cast<std::size_t>(j)] = w_(i, j);
    if (has_delta_) o.delta = delta(i);
    return o;
  }

  // Number of rows in the (s, a) cell.
  [[nodiscard]] Eigen::Index cell_count(int s_value, int a_value) const {
    Eigen::Index c = 0;
    for (std::size_t i = 0; i < s_.size(); ++i) c += (s_[i] == s_value && a_[i] == a_value);
    return c;
  }

  // Rows selected by index, keeping flags.
  [[nodiscard]] FusionDataset subset(const IndexVector& rows) const {
    FusionDataset out;
    out.w_.resize(static_cast<Eigen::Index>(rows.size()), d());
    out.y_.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto i = static_cast<std::size_t>(rows[k]);
      out.s_.push_back(s_[i]);
      out.a_.push_back(a_[i]);
      out.delta_.push_back(delta_[i]);
      out.w_.row(static_cast<Eigen::Index>(k)) = w_.row(static_cast<Eigen::Index>(i));
      out.y_(static_cast<Eigen::Index>(k)) = y_(static_cast<Eigen::Index>(i));
    }
    out.has_delta_ = has_delta_;
    out.external_controls_only_ = external_controls_only_;
    return out;
  }

  [[nodiscard]] FusionDataset without_delta() const {
    FusionDataset out = *this;
    out.has_delta_ = false;
    std::fill(out.delta_.begin(), out.delta_.end(), 1);
    return out;
  }

 private:
  void validate_values() const {
    for (std::size_t i = 0; i < s_.size(); ++i) {
      if (s_[i] != 0 && s_[i] != 1) throw ValidationError("non-binary trial indicator");
      if (a_[i] != 0 && a_[i] != 1) throw ValidationError("non-binary treatment");
      if (delta_[i] != 0 && delta_[i] != 1) throw ValidationError("non-binary outcome-observed indicator");
      for (Eigen::Index j = 0; j < w_.cols(); ++j) {
        if (!std::isfinite(w_(static_cast<Eigen::Index>(i), j))) {
          throw ValidationError("non-finite covariate in row " + std::to_string(i + 1));
        }
      }
      if (delta_[i] == 1 && !std::isfinite(y_(static_cast<Eigen::Index>(i)))) {
        throw ValidationError("non-finite outcome in observed row " + std::to_string(i + 1));
      }
    }
    if (cell_count(1, 1) == 0) throw ValidationError("empty (s=1,a=1) cell");
    if (cell_count(1, 0) == 0) throw ValidationError("empty (s=1,a=0) cell");
  }

  std::vector<int> s_;
  Matrix w_;
  std::vector<int> a_;
  Vector y_;
  std::vector<int> delta_;
  bool has_delta_ = false;
  bool external_controls_only_ = false;
};

// Column mapping for CSV ingestion. Empty covariate list means `w1..wd`.
struct CsvSchema {
  std::vector<std::string> covariate_columns;
  std::optional<bool> external_controls_only;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  for (auto& f : out) {
    const auto b = f.find_first_not_of(" \t\"");
    const auto e = f.find_last_not_of(" \t\"");
    f = b == std::string::npos ? std::string{} : f.substr(b, e - b + 1);
  }
  return out;
}

inline std::optional<double> parse_double(std::string_view field) {
  if (field.empty()) return std::nullopt;
  double v = 0.0;
  const auto* first = field.data();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, field.data() + field.size(), v);
  if (ec != std::errc{} || ptr != field.data() + field.size()) return std::nullopt;
  return v;
}

inline int parse_binary(std::string_view field, const char* what) {
  const auto v = parse_double(field);
  if (!v || (*v != 0.0 && *v != 1.0)) throw ValidationError(std::string("non-binary ") + what);
  return static_cast<int>(*v);
}

}  // namespace detail

inline FusionDataset read_csv(std::istream& in, const CsvSchema& schema = {}) {
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("empty CSV input");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
  const auto header = detail::split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t j = 0; j < header.size(); ++j) col[header[j]] = j;
  auto require = [&](const std::string& name) {
    auto it = col.find(name);
    if (it == col.end()) throw ValidationError("missing column '" + name + "'");
    return it->second;
  };
  const auto s_col = require("s");
  const auto a_col = require("a");
  const auto y_col = require("y");
  std::optional<std::size_t> delta_col;
  if (col.count("delta")) delta_col = col["delta"];

  std::vector<std::size_t> w_cols;
  if (!schema.covariate_columns.empty()) {
    for (const auto& name : schema.covariate_columns) w_cols.push_back(require(name));
  } else {
    for (int k = 1;; ++k) {
      auto it = col.find("w" + std::to_string(k));
      if (it == col.end()) break;
      w_cols.push_back(it->second);
    }
    if (w_cols.empty()) throw ValidationError("missing column 'w1'");
  }

  std::vector<int> s, a, delta;
  std::vector<double> y, w;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    ++row;
    const auto f = detail::split_csv_line(line);
    if (f.size() != header.size()) {
      throw ValidationError("row " + std::to_string(row) + " has " + std::to_string(f.size()) +
                            " fields, expected " + std::to_string(header.size()));
    }
    s.push_back(detail::parse_binary(f[s_col], "trial indicator"));
    a.push_back(detail::parse_binary(f[a_col], "treatment"));
    const int dl = delta_col ? detail::parse_binary(f[*delta_col], "outcome-observed indicator") : 1;
    delta.push_back(dl);
    const auto yv = detail::parse_double(f[y_col]);
    if (!yv) {
      if (dl == 1 || (f[y_col] != "" && f[y_col] != "NA" && f[y_col] != "nan")) {
        throw ValidationError("non-numeric outcome in row " + std::to_string(row));
      }
      y.push_back(std::numeric_limits<double>::quiet_NaN());
    } else {
      y.push_back(*yv);
    }
    for (auto c : w_cols) {
      const auto v = detail::parse_double(f[c]);
      if (!v) throw ValidationError("non-numeric covariate '" + header[c] + "' in row " + std::to_string(row));
      w.push_back(*v);
    }
  }
  if (s.empty()) throw ValidationError("CSV has no data rows");
  const auto n = static_cast<Eigen::Index>(s.size());
  const auto d = static_cast<Eigen::Index>(w_cols.size());
  Matrix wm = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(w.data(), n, d);
  Vector yv = Eigen::Map<const Vector>(y.data(), n);
  std::optional<std::vector<int>> dl;
  if (delta_col) dl = std::move(delta);
  return FusionDataset(std::move(s), std::move(wm), std::move(a), std::move(yv), std::move(dl),
                       schema.external_controls_only);
}

inline FusionDataset load_csv(const std::string& path, const CsvSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  return read_csv(in, schema);
}

// Writes with 17 significant digits so reloading is bit-exact.
inline void write_csv(std::ostream& out, const FusionDataset& data) {
  out << "s";
  for (Eigen::Index j = 0; j < data.d(); ++j) out << ",w" << (j + 1);
  out << ",a,y";
  if (data.has_delta()) out << ",delta";
  out << '\n';
  char buf[64];
  auto num = [&](double v) -> const char* {
    if (!std::isfinite(v)) return "NA";
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  };
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    out << data.s(i);
    for (Eigen::Index j = 0; j < data.d(); ++j) out << ',' << num(data.w()(i, j));
    out << ',' << data.a(i) << ',' << num(data.y(i));
    if (data.has_delta()) out << ',' << data.delta(i);
    out << '\n';
  }
}

inline void save_csv(const std::string& path, const FusionDataset& data) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  write_csv(out, data);
}

// Partition of row indices into v folds.
struct FoldAssignment {
  int v = 0;
  std::vector<int> fold_of;
  std::uint64_t seed = 0;
  bool stratified = false;

  [[nodiscard]] IndexVector validation(int fold) const {
    IndexVector out;
    for (std::size_t i = 0; i < fold_of.size(); ++i) {
      if (fold_of[i] == fold) out.push_back(static_cast<int>(i));
    }
    return out;
  }
  [[nodiscard]] IndexVector training(int fold) const {
    IndexVector out;
    for (std::size_t i = 0; i < fold_of.size(); ++i) {
      if (fold_of[i] != fold) out.push_back(static_cast<int>(i));
    }
    return out;
  }
  [[nodiscard]] std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> out(static_cast<std::size_t>(v), 0);
    for (int f : fold_of) ++out[static_cast<std::size_t>(f)];
    return out;
  }
  // Same partition with fold labels shifted by `offset`.
  [[nodiscard]] FoldAssignment rotated(int offset) const {
    FoldAssignment out = *this;
    for (auto& f : out.fold_of) f = (f + offset) % v;
    return out;
  }
  // Restriction to `rows`, indexed by position within `rows`.
  [[nodiscard]] FoldAssignment restricted(const IndexVector& rows) const {
    FoldAssignment out = *this;
    out.fold_of.clear();
    for (int i : rows) out.fold_of.push_back(fold_of[static_cast<std::size_t>(i)]);
    return out;
  }
};

namespace detail {

inline FoldAssignment deal_folds(const std::vector<int>& strata, int n_strata, int v,
                                 std::uint64_t seed, bool stratified) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<int>> groups(static_cast<std::size_t>(n_strata));
  for (std::size_t i = 0; i < strata.size(); ++i) {
    groups[static_cast<std::size_t>(strata[i])].push_back(static_cast<int>(i));
  }
  FoldAssignment out;
  out.v = v;
  out.seed = seed;
  out.stratified = stratified;
  out.fold_of.assign(strata.size(), 0);
  std::size_t position = 0;
  for (auto& g : groups) {
    std::shuffle(g.begin(), g.end(), rng);
    for (int i : g) out.fold_of[static_cast<std::size_t>(i)] = static_cast<int>(position++ % static_cast<std::size_t>(v));
  }
  return out;
}

}  // namespace detail

// Stratified by (s, a) whenever every non-empty stratum has at least v rows.
inline FoldAssignment make_folds(const FusionDataset& data, int v, std::uint64_t seed) {
  if (v < 2) throw ValidationError("fold count must be at least 2");
  if (data.n() < v) throw ValidationError("fewer rows than folds");
  std::vector<int> strata(static_cast<std::size_t>(data.n()));
  std::array<Eigen::Index, 4> counts{};
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    strata[static_cast<std::size_t>(i)] = 2 * data.s(i) + data.a(i);
    ++counts[static_cast<std::size_t>(2 * data.s(i) + data.a(i))];
  }
  bool stratify = true;
  for (auto c : counts) {
    if (c > 0 && c < v) stratify = false;
  }
  if (!stratify) std::fill(strata.begin(), strata.end(), 0);
  return detail::deal_folds(strata, stratify ? 4 : 1, v, seed, stratify);
}

}  // namespace atmle
