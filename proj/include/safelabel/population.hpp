#ifndef SAFELABEL_POPULATION_HPP
#define SAFELABEL_POPULATION_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "safelabel/error.hpp"
#include "safelabel/io.hpp"
#include "safelabel/rng.hpp"

namespace safelabel {

/// One economically relevant text piece. `v_true` is the trusted measurement;
/// it may be absent on pieces that only carry machine labels.
struct TextPiece {
  std::string id;
  std::optional<std::string> text;
  std::optional<double> v_true;
  std::optional<double> y;
  std::vector<double> w;
  std::map<std::string, double> labels;
  /// Columns the schema does not name (e.g. an arm assignment column), kept verbatim.
  std::map<std::string, std::string> extras;

  bool operator==(const TextPiece&) const = default;
};

/// Immutable, ordered finite population. Index order is the canonical
/// iteration order for every sum in the library.
class Population {
public:
  explicit Population(std::vector<TextPiece> pieces) : pieces_(std::move(pieces)) {
    if (pieces_.empty()) throw ValidationError("population must contain at least one piece");
    k_ = pieces_.front().w.size();
    if (k_ == 0) throw ValidationError("covariate dimension must be at least 1");
    index_.reserve(pieces_.size());
    for (std::size_t i = 0; i < pieces_.size(); ++i) {
      const auto& p = pieces_[i];
      if (p.w.size() != k_) {
        throw ValidationError("inconsistent covariate dimension for piece '" + p.id +
                              "': expected " + std::to_string(k_) + ", got " +
                              std::to_string(p.w.size()));
      }
      if (!index_.emplace(p.id, i).second) throw ValidationError("duplicate id '" + p.id + "'");
      auto finite = [&](double x, const char* what) {
        if (!std::isfinite(x))
          throw ValidationError(std::string("non-finite ") + what + " on piece '" + p.id + "'");
      };
      if (p.v_true) finite(*p.v_true, "v");
      if (p.y) finite(*p.y, "y");
      for (double x : p.w) finite(x, "covariate");
      for (const auto& [name, value] : p.labels) finite(value, "label");
    }
  }

  std::size_t size() const noexcept { return pieces_.size(); }
  std::size_t k() const noexcept { return k_; }
  const std::vector<TextPiece>& pieces() const noexcept { return pieces_; }
  const TextPiece& operator[](std::size_t i) const { return pieces_[i]; }

  std::optional<std::size_t> index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  /// Sorted union of labeler ids present on any piece.
  std::vector<std::string> labelers() const {
    std::vector<std::string> out;
    for (const auto& p : pieces_)
      for (const auto& [name, value] : p.labels) out.push_back(name);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  bool operator==(const Population& other) const { return pieces_ == other.pieces_; }

private:
  std::vector<TextPiece> pieces_;
  std::size_t k_ = 0;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Column extraction. Missing values are errors here (estimation time), never
// at ingestion.

inline Eigen::MatrixXd design_matrix(const Population& pop, std::span<const std::size_t> rows) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(pop.k()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& w = pop[rows[i]].w;
    for (std::size_t j = 0; j < w.size(); ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = w[j];
  }
  return x;
}

inline Eigen::VectorXd truth_vector(const Population& pop, std::span<const std::size_t> rows) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& p = pop[rows[i]];
    if (!p.v_true) throw ValidationError("truth value missing on piece '" + p.id + "'");
    v(static_cast<Eigen::Index>(i)) = *p.v_true;
  }
  return v;
}

inline Eigen::VectorXd label_vector(const Population& pop, const std::string& labeler,
                                    std::span<const std::size_t> rows) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& p = pop[rows[i]];
    auto it = p.labels.find(labeler);
    if (it == p.labels.end())
      throw ValidationError("labeler '" + labeler + "' missing on piece '" + p.id + "'");
    v(static_cast<Eigen::Index>(i)) = it->second;
  }
  return v;
}

inline Eigen::VectorXd covariate_vector(const Population& pop, std::size_t column,
                                        std::span<const std::size_t> rows) {
  if (column >= pop.k())
    throw ValidationError("covariate column w_" + std::to_string(column) + " out of range");
  Eigen::VectorXd v(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) v(static_cast<Eigen::Index>(i)) = pop[rows[i]].w[column];
  return v;
}

inline std::vector<std::size_t> all_rows(const Population& pop) {
  std::vector<std::size_t> rows(pop.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return rows;
}

// ---------------------------------------------------------------------------
// Categorical concepts

enum class DummyCoding { full, drop_first };

/// One-hot encodes `category` against the ordered `levels`. With drop_first
/// the first level is the reference class (all zeros), for use alongside an
/// intercept column.
inline std::vector<double> one_hot(const std::string& category,
                                   const std::vector<std::string>& levels,
                                   DummyCoding coding = DummyCoding::full) {
  auto it = std::find(levels.begin(), levels.end(), category);
  if (it == levels.end()) throw ValidationError("unknown category '" + category + "'");
  const auto pos = static_cast<std::size_t>(it - levels.begin());
  const std::size_t offset = coding == DummyCoding::drop_first ? 1 : 0;
  std::vector<double> out(levels.size() - offset, 0.0);
  if (pos >= offset) out[pos - offset] = 1.0;
  return out;
}

// ---------------------------------------------------------------------------
// File formats

enum class FileFormat { csv, json };

inline FileFormat format_from_path(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".csv") return FileFormat::csv;
  if (ext == ".json") return FileFormat::json;
  throw ValidationError("cannot infer file format from extension '" + ext + "'");
}

namespace detail {

inline bool parse_covariate_column(const std::string& name, std::size_t& index) {
  if (name.size() < 3 || name.compare(0, 2, "w_") != 0) return false;
  std::size_t value = 0;
  auto [ptr, ec] = std::from_chars(name.data() + 2, name.data() + name.size(), value);
  if (ec != std::errc{} || ptr != name.data() + name.size()) return false;
  index = value;
  return true;
}

inline void check_intercept(const TextPiece& p, std::size_t row) {
  if (!p.w.empty() && p.w[0] != 1.0) throw ParseError("w_0 must be 1.0 for piece '" + p.id + "'", row);
}

}  // namespace detail

inline Population read_population_csv(std::istream& in) {
  io::CsvReader reader(in);
  std::vector<std::string> header;
  if (!reader.next(header)) throw ParseError("empty CSV input", 0);
  for (auto& h : header) h = std::string(io::trim(h));

  enum class Col { id, v, y, text, w, vhat, extra };
  struct Column {
    Col kind;
    std::size_t index = 0;
    std::string name{};
  };
  std::vector<Column> cols;
  std::size_t k = 0;
  bool has_id = false, has_v = false;
  for (const auto& h : header) {
    std::size_t wi = 0;
    if (h == "id") {
      cols.push_back({Col::id, 0, {}});
      has_id = true;
    } else if (h == "v") {
      cols.push_back({Col::v, 0, {}});
      has_v = true;
    } else if (h == "y") {
      cols.push_back({Col::y, 0, {}});
    } else if (h == "text") {
      cols.push_back({Col::text, 0, {}});
    } else if (detail::parse_covariate_column(h, wi)) {
      cols.push_back({Col::w, wi, {}});
      k = std::max(k, wi + 1);
    } else if (h.rfind("vhat_", 0) == 0 && h.size() > 5) {
      cols.push_back({Col::vhat, 0, h.substr(5)});
    } else {
      cols.push_back({Col::extra, 0, h});
    }
  }
  if (!has_id) throw ParseError("CSV header lacks required column 'id'", 0);
  if (!has_v) throw ParseError("CSV header lacks required column 'v'", 0);
  {
    std::vector<bool> seen(k, false);
    for (const auto& c : cols)
      if (c.kind == Col::w) seen[c.index] = true;
    for (std::size_t j = 0; j < k; ++j)
      if (!seen[j]) throw ParseError("CSV header lacks covariate column w_" + std::to_string(j), 0);
  }

  std::vector<TextPiece> pieces;
  std::vector<std::string> fields;
  std::size_t row = 0;
  while (reader.next(fields)) {
    ++row;
    if (fields.size() != cols.size()) {
      throw ParseError("expected " + std::to_string(cols.size()) + " fields, found " +
                           std::to_string(fields.size()),
                       row);
    }
    TextPiece p;
    p.w.assign(k, 0.0);
    auto number = [&](const std::string& s, const std::string& what) {
      auto d = io::parse_double(s);
      if (!d) throw ParseError("malformed number '" + s + "' in column " + what, row);
      return *d;
    };
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const std::string& f = fields[c];
      const bool blank = io::trim(f).empty();
      switch (cols[c].kind) {
        case Col::id:
          if (blank) throw ParseError("empty id", row);
          p.id = f;
          break;
        case Col::v:
          if (!blank) p.v_true = number(f, "v");
          break;
        case Col::y:
          if (!blank) p.y = number(f, "y");
          break;
        case Col::text:
          if (!f.empty()) p.text = f;
          break;
        case Col::w:
          if (blank) throw ParseError("missing covariate w_" + std::to_string(cols[c].index), row);
          p.w[cols[c].index] = number(f, "w_" + std::to_string(cols[c].index));
          break;
        case Col::vhat:
          if (!blank) p.labels[cols[c].name] = number(f, "vhat_" + cols[c].name);
          break;
        case Col::extra:
          p.extras[cols[c].name] = f;
          break;
      }
    }
    detail::check_intercept(p, row);
    pieces.push_back(std::move(p));
  }
  if (pieces.empty()) throw ParseError("CSV contains no data rows", 0);
  return Population(std::move(pieces));
}

inline void write_population_csv(const Population& pop, std::ostream& out) {
  const auto labelers = pop.labelers();
  bool any_y = false, any_text = false;
  std::vector<std::string> extra_names;
  for (const auto& p : pop.pieces()) {
    any_y = any_y || p.y.has_value();
    any_text = any_text || p.text.has_value();
    for (const auto& [name, value] : p.extras) extra_names.push_back(name);
  }
  std::sort(extra_names.begin(), extra_names.end());
  extra_names.erase(std::unique(extra_names.begin(), extra_names.end()), extra_names.end());

  out << "id,v";
  for (std::size_t j = 0; j < pop.k(); ++j) out << ",w_" << j;
  if (any_y) out << ",y";
  if (any_text) out << ",text";
  for (const auto& l : labelers) out << ",vhat_" << io::csv_escape(l);
  for (const auto& e : extra_names) out << "," << io::csv_escape(e);
  out << "\n";
  for (const auto& p : pop.pieces()) {
    out << io::csv_escape(p.id) << ",";
    if (p.v_true) out << io::format_double(*p.v_true);
    for (double x : p.w) out << "," << io::format_double(x);
    if (any_y) {
      out << ",";
      if (p.y) out << io::format_double(*p.y);
    }
    if (any_text) {
      out << ",";
      if (p.text) out << io::csv_escape(*p.text);
    }
    for (const auto& l : labelers) {
      out << ",";
      if (auto it = p.labels.find(l); it != p.labels.end()) out << io::format_double(it->second);
    }
    for (const auto& e : extra_names) {
      out << ",";
      if (auto it = p.extras.find(e); it != p.extras.end()) out << io::csv_escape(it->second);
    }
    out << "\n";
  }
}

inline Population population_from_json(const nlohmann::json& doc) {
  if (!doc.is_array()) throw ParseError("population JSON must be an array of objects", 0);
  std::vector<TextPiece> pieces;
  pieces.reserve(doc.size());
  std::size_t row = 0;
  for (const auto& obj : doc) {
    ++row;
    if (!obj.is_object()) throw ParseError("expected an object", row);
    TextPiece p;
    auto num = [&](const nlohmann::json& j, const std::string& what) {
      if (!j.is_number()) throw ParseError("field '" + what + "' must be a number", row);
      return j.get<double>();
    };
    std::size_t k = 0;
    for (const auto& [key, value] : obj.items()) {
      std::size_t wi = 0;
      if (key == "id") {
        if (!value.is_string()) throw ParseError("field 'id' must be a string", row);
        p.id = value.get<std::string>();
      } else if (key == "v") {
        if (!value.is_null()) p.v_true = num(value, key);
      } else if (key == "y") {
        if (!value.is_null()) p.y = num(value, key);
      } else if (key == "text") {
        if (!value.is_null()) p.text = value.get<std::string>();
      } else if (key == "vhat") {
        if (!value.is_object()) throw ParseError("field 'vhat' must be an object", row);
        for (const auto& [name, lv] : value.items())
          if (!lv.is_null()) p.labels[name] = num(lv, "vhat." + name);
      } else if (detail::parse_covariate_column(key, wi)) {
        k = std::max(k, wi + 1);
      } else {
        p.extras[key] = value.is_string() ? value.get<std::string>() : value.dump();
      }
    }
    if (p.id.empty()) throw ParseError("missing field 'id'", row);
    if (!obj.contains("v")) throw ParseError("missing field 'v'", row);
    p.w.assign(k, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      const std::string key = "w_" + std::to_string(j);
      if (!obj.contains(key)) throw ParseError("missing field '" + key + "'", row);
      p.w[j] = num(obj.at(key), key);
    }
    detail::check_intercept(p, row);
    pieces.push_back(std::move(p));
  }
  if (pieces.empty()) throw ParseError("population JSON is empty", 0);
  return Population(std::move(pieces));
}

inline nlohmann::json population_to_json(const Population& pop) {
  auto doc = nlohmann::json::array();
  for (const auto& p : pop.pieces()) {
    nlohmann::json o;
    o["id"] = p.id;
    o["v"] = p.v_true ? nlohmann::json(*p.v_true) : nlohmann::json(nullptr);
    for (std::size_t j = 0; j < p.w.size(); ++j) o["w_" + std::to_string(j)] = p.w[j];
    if (p.y) o["y"] = *p.y;
    if (p.text) o["text"] = *p.text;
    if (!p.labels.empty()) o["vhat"] = p.labels;
    for (const auto& [name, value] : p.extras) o[name] = value;
    doc.push_back(std::move(o));
  }
  return doc;
}

inline Population load_population(const std::filesystem::path& path, FileFormat format) {
  const std::string contents = io::read_file(path);
  if (format == FileFormat::csv) {
    std::istringstream in(contents);
    return read_population_csv(in);
  }
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(contents);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("invalid JSON: ") + e.what(), 0);
  }
  return population_from_json(doc);
}

inline Population load_population(const std::filesystem::path& path) {
  return load_population(path, format_from_path(path));
}

inline void save_population(const Population& pop, const std::filesystem::path& path,
                            FileFormat format) {
  if (format == FileFormat::csv) {
    std::ostringstream out;
    write_population_csv(pop, out);
    io::write_file(path, out.str());
  } else {
    io::write_file(path, population_to_json(pop).dump(1) + "\n");
  }
}

inline void save_population(const Population& pop, const std::filesystem::path& path) {
  save_population(pop, path, format_from_path(path));
}

// ---------------------------------------------------------------------------
// Synthetic populations

enum class CovariateLaw { standard_normal, bernoulli, fixed_grid };

/// Generator for populations with a planted error structure:
///   V  = W'beta_star + noise_sd_v * e
///   V^ = V + W'gamma + noise_sd_delta * u
/// so that the population projection of V^ - V on W has coefficients close
/// to gamma (exactly gamma when noise_sd_delta is 0).
struct SyntheticSpec {
  std::size_t n_pieces = 1000;
  std::vector<double> beta_star{0.0, 1.0};
  std::vector<double> gamma{0.0, 0.0};
  double noise_sd_v = 1.0;
  double noise_sd_delta = 1.0;
  CovariateLaw covariate_law = CovariateLaw::standard_normal;
  double bernoulli_p = 0.5;
  std::uint64_t seed = 0;
  std::string labeler = "synthetic";

  void validate() const {
    if (n_pieces == 0) throw ValidationError("n_pieces must be positive");
    if (beta_star.empty()) throw ValidationError("beta_star must have length k >= 1");
    if (gamma.size() != beta_star.size())
      throw ValidationError("gamma and beta_star must have the same length");
    if (!(noise_sd_v >= 0.0) || !(noise_sd_delta >= 0.0))
      throw ValidationError("noise standard deviations must be nonnegative");
    if (covariate_law == CovariateLaw::bernoulli && !(bernoulli_p > 0.0 && bernoulli_p < 1.0))
      throw ValidationError("bernoulli p must lie in (0, 1)");
    for (double b : beta_star)
      if (!std::isfinite(b)) throw ValidationError("beta_star must be finite");
    for (double g : gamma)
      if (!std::isfinite(g)) throw ValidationError("gamma must be finite");
  }
};

inline Population generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t n = spec.n_pieces;
  const std::size_t k = spec.beta_star.size();
  std::vector<TextPiece> pieces;
  pieces.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = CounterRng::stream(spec.seed, i);
    TextPiece p;
    p.id = "r" + std::to_string(i);
    p.w.assign(k, 1.0);
    for (std::size_t j = 1; j < k; ++j) {
      switch (spec.covariate_law) {
        case CovariateLaw::standard_normal:
          p.w[j] = rng.normal();
          break;
        case CovariateLaw::bernoulli:
          p.w[j] = rng.bernoulli(spec.bernoulli_p) ? 1.0 : 0.0;
          break;
        case CovariateLaw::fixed_grid: {
          // Rotated copies of one grid on [-1, 1]; distinct columns are not collinear.
          const std::size_t shift = (j - 1) * (n / (k + 1) + 1);
          const std::size_t pos = (i + shift) % n;
          p.w[j] = n == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(pos) / static_cast<double>(n - 1);
          break;
        }
      }
    }
    double v = 0.0, shift = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      v += p.w[j] * spec.beta_star[j];
      shift += p.w[j] * spec.gamma[j];
    }
    const double eps = rng.normal();
    const double u = rng.normal();
    v += spec.noise_sd_v * eps;
    p.v_true = v;
    p.labels[spec.labeler] = v + shift + spec.noise_sd_delta * u;
    pieces.push_back(std::move(p));
  }
  return Population(std::move(pieces));
}

}  // namespace safelabel

#endif
