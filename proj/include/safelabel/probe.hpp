#ifndef SAFELABEL_PROBE_HPP
#define SAFELABEL_PROBE_HPP

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

// Eigen before httplib: <resolv.h> defines a `_res` macro that collides
// with Eigen parameter names.
#include <Eigen/Dense>
#include <httplib.h>
#include <json.hpp>
#include <openssl/evp.h>

#include "safelabel/error.hpp"
#include "safelabel/io.hpp"
#include "safelabel/parallel.hpp"
#include "safelabel/population.hpp"
#include "safelabel/rng.hpp"
#include "safelabel/stats.hpp"

namespace safelabel {

// ---------------------------------------------------------------------------
// Text splitting

struct TextSplit {
  std::string prefix;
  std::string separator;
  std::string suffix;
  bool no_whitespace = false;  ///< fell back to a character split
};

namespace detail {

inline bool utf8_continuation(unsigned char c) { return (c & 0xC0) == 0x80; }

inline bool ascii_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

}  // namespace detail

/// Splits at the interior whitespace run nearest to fraction * (code points);
/// the run becomes the separator so prefix + separator + suffix == text.
/// Without interior whitespace the split falls at the nearest code point
/// boundary and `no_whitespace` is set.
inline TextSplit split_text(std::string_view text, double fraction) {
  if (text.empty()) throw ValidationError("cannot split empty text");
  if (!(fraction > 0.0 && fraction < 1.0)) throw ValidationError("split fraction must lie in (0, 1)");
  // Byte offset of every code point, plus the end.
  std::vector<std::size_t> cp;
  for (std::size_t i = 0; i < text.size(); ++i)
    if (!detail::utf8_continuation(static_cast<unsigned char>(text[i]))) cp.push_back(i);
  const std::size_t n_cp = cp.size();
  cp.push_back(text.size());
  const double target = fraction * static_cast<double>(n_cp);

  // Whitespace runs in code point units, excluding runs touching either end.
  std::optional<std::pair<std::size_t, std::size_t>> best;
  double best_dist = 0.0;
  for (std::size_t i = 0; i < n_cp;) {
    if (!detail::ascii_space(text[cp[i]])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < n_cp && detail::ascii_space(text[cp[j]])) ++j;
    if (i > 0 && j < n_cp) {
      const double s = static_cast<double>(i), e = static_cast<double>(j);
      const double d = target < s ? s - target : (target > e ? target - e : 0.0);
      if (!best || d < best_dist) {
        best = std::make_pair(i, j);
        best_dist = d;
      }
    }
    i = j;
  }
  TextSplit out;
  if (best) {
    out.prefix = std::string(text.substr(0, cp[best->first]));
    out.separator = std::string(text.substr(cp[best->first], cp[best->second] - cp[best->first]));
    out.suffix = std::string(text.substr(cp[best->second]));
    return out;
  }
  std::size_t at = static_cast<std::size_t>(std::llround(target));
  if (n_cp >= 2) at = std::clamp<std::size_t>(at, 1, n_cp - 1);
  out.prefix = std::string(text.substr(0, cp[at]));
  out.suffix = std::string(text.substr(cp[at]));
  out.no_whitespace = true;
  return out;
}

/// Exact reproduction: equal after trimming outer whitespace, case-sensitive.
inline bool exact_match(std::string_view generated, std::string_view truth) {
  return io::trim(generated) == io::trim(truth);
}

inline std::string render_prompt(const std::string& tmpl, const std::string& prefix) {
  const std::string key = "{prefix}";
  const auto pos0 = tmpl.find(key);
  if (pos0 == std::string::npos) throw ValidationError("prompt template lacks a {prefix} placeholder");
  std::string out;
  std::size_t from = 0;
  for (auto pos = pos0; pos != std::string::npos; pos = tmpl.find(key, from)) {
    out.append(tmpl, from, pos - from);
    out += prefix;
    from = pos + key.size();
  }
  out.append(tmpl, from, std::string::npos);
  return out;
}

// ---------------------------------------------------------------------------
// Hashing and embeddings geometry

inline std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw IoError("sha256 digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xF]);
  }
  return out;
}

using Embedding = std::vector<double>;

/// 1 - cos(a, b) after unit normalization; lies in [0, 2].
inline double cosine_distance(const Embedding& a, const Embedding& b) {
  if (a.size() != b.size())
    throw ValidationError("embedding dimension mismatch: " + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()));
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (!(aa > 0.0) || !(bb > 0.0)) throw NumericError("zero embedding vector");
  const double c = ab / (std::sqrt(aa) * std::sqrt(bb));
  return std::clamp(1.0 - c, 0.0, 2.0);
}

// ---------------------------------------------------------------------------
// Client

struct RetryPolicy {
  unsigned max_attempts = 3;
  unsigned backoff_ms = 100;  ///< doubled after every failed attempt
};

struct ProbeConfig {
  double split_fraction = 0.5;
  std::string prompt_template =
      "Complete the following text. Continue it exactly as it is written, with no commentary.\n\n{prefix}";
  std::string endpoint = "http://127.0.0.1:8080/v1";
  std::string model = "gpt-4o-mini";
  std::string embed_model = "text-embedding-3-small";
  unsigned concurrency = 4;
  RetryPolicy retry;
  std::optional<std::filesystem::path> cache_dir;
  std::uint64_t seed = 0;
  std::string api_key_env = "SAFELABEL_API_KEY";
  unsigned timeout_s = 60;
  std::size_t embed_batch = 64;

  void validate() const {
    if (!(split_fraction > 0.0 && split_fraction < 1.0))
      throw ValidationError("split fraction must lie in (0, 1)");
    if (concurrency < 1) throw ValidationError("concurrency must be at least 1");
    if (retry.max_attempts < 1) throw ValidationError("retry attempts must be at least 1");
    if (prompt_template.find("{prefix}") == std::string::npos)
      throw ValidationError("prompt template lacks a {prefix} placeholder");
    if (embed_batch < 1) throw ValidationError("embedding batch must be at least 1");
  }
};

/// Raised for responses that may succeed on retry (connection errors, 429, 5xx).
class TransientError : public TransportError {
public:
  using TransportError::TransportError;
};

/// OpenAI-compatible chat and embedding calls with an on-disk
/// content-addressed cache. Cache hits issue no request.
class LlmClient {
public:
  explicit LlmClient(ProbeConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    split_endpoint();
    if (const char* key = std::getenv(cfg_.api_key_env.c_str())) api_key_ = key;
    if (cfg_.cache_dir) {
      std::error_code ec;
      std::filesystem::create_directories(*cfg_.cache_dir, ec);
      if (ec) throw IoError("cannot create cache directory " + cfg_.cache_dir->string());
    }
  }

  std::string complete(const std::string& prompt) {
    const nlohmann::json key = {{"kind", "chat"}, {"model", cfg_.model}, {"input", prompt}};
    if (auto hit = cache_get(key)) return hit->get<std::string>();
    const nlohmann::json body = {{"model", cfg_.model},
                                 {"messages", {{{"role", "user"}, {"content", prompt}}}},
                                 {"temperature", 0}};
    const auto resp = with_retry([&] { return post("/chat/completions", body); });
    std::string content;
    try {
      content = resp.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw TransportError(std::string("malformed chat response: ") + e.what());
    }
    cache_put(key, content);
    return content;
  }

  /// One embedding per input, in input order. Uncached inputs are sent in
  /// batches of cfg.embed_batch.
  std::vector<Embedding> embed(const std::vector<std::string>& inputs) {
    std::vector<Embedding> out(inputs.size());
    std::vector<std::size_t> missing;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (auto hit = cache_get(embed_key(inputs[i]))) out[i] = hit->get<Embedding>();
      else missing.push_back(i);
    }
    for (std::size_t start = 0; start < missing.size(); start += cfg_.embed_batch) {
      const std::size_t stop = std::min(missing.size(), start + cfg_.embed_batch);
      nlohmann::json batch = nlohmann::json::array();
      for (std::size_t m = start; m < stop; ++m) batch.push_back(inputs[missing[m]]);
      const nlohmann::json body = {{"model", cfg_.embed_model}, {"input", batch}};
      const auto resp = with_retry([&] { return post("/embeddings", body); });
      try {
        const auto& data = resp.at("data");
        if (data.size() != stop - start) throw TransportError("embedding response has the wrong length");
        for (const auto& item : data) {
          const auto idx = item.at("index").get<std::size_t>();
          if (idx >= stop - start) throw TransportError("embedding index out of range");
          const std::size_t i = missing[start + idx];
          out[i] = item.at("embedding").get<Embedding>();
          cache_put(embed_key(inputs[i]), out[i]);
        }
      } catch (const nlohmann::json::exception& e) {
        throw TransportError(std::string("malformed embedding response: ") + e.what());
      }
    }
    return out;
  }

  /// Network requests issued (including retries).
  std::size_t requests() const noexcept { return requests_.load(); }
  const ProbeConfig& config() const noexcept { return cfg_; }

private:
  nlohmann::json embed_key(const std::string& input) const {
    return {{"kind", "embedding"}, {"model", cfg_.embed_model}, {"input", input}};
  }

  void split_endpoint() {
    const std::string& e = cfg_.endpoint;
    const auto scheme = e.find("://");
    if (scheme == std::string::npos || (e.compare(0, scheme, "http") != 0 && e.compare(0, scheme, "https") != 0))
      throw ValidationError("endpoint must start with http:// or https://");
    const auto path = e.find('/', scheme + 3);
    host_ = path == std::string::npos ? e : e.substr(0, path);
    prefix_ = path == std::string::npos ? "" : e.substr(path);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
  }

  std::optional<nlohmann::json> cache_get(const nlohmann::json& key) const {
    if (!cfg_.cache_dir) return std::nullopt;
    const auto path = *cfg_.cache_dir / (sha256_hex(key.dump()) + ".json");
    std::error_code ec;
    if (!std::filesystem::exists(path, ec)) return std::nullopt;
    auto doc = nlohmann::json::parse(io::read_file(path), nullptr, false);
    if (doc.is_discarded() || !doc.contains("key") || doc["key"] != key || !doc.contains("response"))
      return std::nullopt;
    return doc["response"];
  }

  void cache_put(const nlohmann::json& key, const nlohmann::json& response) const {
    if (!cfg_.cache_dir) return;
    const std::string name = sha256_hex(key.dump());
    const auto path = *cfg_.cache_dir / (name + ".json");
    const auto tmp = *cfg_.cache_dir /
                     (name + ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())));
    io::write_file(tmp, nlohmann::json{{"key", key}, {"response", response}}.dump());
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot write cache entry " + path.string());
  }

  nlohmann::json post(const std::string& route, const nlohmann::json& body) {
    ++requests_;
    httplib::Client cli(host_);
    cli.set_connection_timeout(static_cast<time_t>(cfg_.timeout_s), 0);
    cli.set_read_timeout(static_cast<time_t>(cfg_.timeout_s), 0);
    cli.set_write_timeout(static_cast<time_t>(cfg_.timeout_s), 0);
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
    auto res = cli.Post(prefix_ + route, headers, body.dump(), "application/json");
    if (!res) throw TransientError("request to " + host_ + prefix_ + route + " failed: " + httplib::to_string(res.error()));
    if (res->status == 429 || res->status >= 500)
      throw TransientError("HTTP " + std::to_string(res->status) + " from " + prefix_ + route);
    if (res->status != 200)
      throw TransportError("HTTP " + std::to_string(res->status) + " from " + prefix_ + route + ": " + res->body);
    auto doc = nlohmann::json::parse(res->body, nullptr, false);
    if (doc.is_discarded()) throw TransportError("response from " + prefix_ + route + " is not JSON");
    return doc;
  }

  template <typename F>
  nlohmann::json with_retry(F&& call) {
    unsigned delay = cfg_.retry.backoff_ms;
    for (unsigned attempt = 1;; ++attempt) {
      try {
        return call();
      } catch (const TransientError&) {
        if (attempt >= cfg_.retry.max_attempts) throw;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(delay));
      delay *= 2;
    }
  }

  ProbeConfig cfg_;
  std::string host_, prefix_, api_key_;
  std::atomic<std::size_t> requests_{0};
};

// ---------------------------------------------------------------------------
// Probe

struct CompletionRecord {
  std::string id;
  std::string prefix, separator, true_suffix;
  std::string generated_suffix;
  bool exact_match = false;
  bool no_whitespace_split = false;
  std::optional<double> embedding_distance;
  std::optional<std::string> error;
};

struct ProbeReport {
  std::size_t n_pieces = 0;
  std::size_t n_failed = 0;
  std::size_t exact_match_count = 0;
  double mean_distance = 0.0;
  double median_distance = 0.0;
  double random_pair_baseline = 0.0;
  std::size_t baseline_pairs = 0;
  std::uint64_t seed = 0;
};

inline constexpr double probe_failure_limit = 0.20;
inline constexpr std::size_t baseline_pair_budget = 1000;

/// Split-text completion for every piece carrying text, in population order.
/// Transport failures are recorded per piece; more than 20% failures aborts.
inline std::vector<CompletionRecord> run_probe(const Population& pop, const ProbeConfig& cfg, LlmClient& client) {
  cfg.validate();
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < pop.size(); ++r)
    if (pop[r].text && !pop[r].text->empty()) rows.push_back(r);
  if (rows.empty()) throw ValidationError("no piece carries text");
  std::vector<CompletionRecord> records(rows.size());
  parallel_for(rows.size(), cfg.concurrency, [&](std::size_t i) {
    const auto& p = pop[rows[i]];
    auto& rec = records[i];
    const auto split = split_text(*p.text, cfg.split_fraction);
    rec.id = p.id;
    rec.prefix = split.prefix;
    rec.separator = split.separator;
    rec.true_suffix = split.suffix;
    rec.no_whitespace_split = split.no_whitespace;
    try {
      rec.generated_suffix = client.complete(render_prompt(cfg.prompt_template, split.prefix));
      rec.exact_match = exact_match(rec.generated_suffix, rec.true_suffix);
    } catch (const IoError& e) {
      rec.error = e.what();
    }
  });
  std::size_t failed = 0;
  for (const auto& r : records) failed += r.error ? 1 : 0;
  if (static_cast<double>(failed) > probe_failure_limit * static_cast<double>(records.size()))
    throw TransportError("probe aborted: " + std::to_string(failed) + " of " + std::to_string(records.size()) +
                         " completions failed (first error: " +
                         *std::find_if(records.begin(), records.end(), [](const auto& r) { return r.error.has_value(); })->error +
                         ")");
  return records;
}

/// Text the generated embedding is computed on: the prefix followed by the
/// generated continuation.
inline std::string generated_full_text(const CompletionRecord& r) {
  return r.prefix + r.separator + std::string(io::trim(r.generated_suffix));
}

inline std::string original_full_text(const CompletionRecord& r) {
  return r.prefix + r.separator + r.true_suffix;
}

/// Unordered pairs (i < j) of distinct indices: all of them when there are at
/// most `budget`, otherwise `budget` distinct pairs drawn from stream (seed).
inline std::vector<std::pair<std::size_t, std::size_t>> baseline_pairs(std::size_t n, std::uint64_t seed,
                                                                       std::size_t budget = baseline_pair_budget) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  if (n < 2) return pairs;
  const std::size_t total = n * (n - 1) / 2;
  if (total <= budget) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
    return pairs;
  }
  auto rng = CounterRng::stream(seed, 0xBA5E);
  std::set<std::pair<std::size_t, std::size_t>> seen;
  while (pairs.size() < budget) {
    std::size_t i = rng.below(n), j = rng.below(n);
    if (i == j) continue;
    if (i > j) std::swap(i, j);
    if (seen.insert({i, j}).second) pairs.emplace_back(i, j);
  }
  return pairs;
}

/// Report from precomputed embeddings (one original and one generated per
/// record; generated entries of failed records are ignored). Fills each
/// record's embedding_distance.
inline ProbeReport probe_report(std::vector<CompletionRecord>& records, const std::vector<Embedding>& originals,
                                const std::vector<Embedding>& generated, std::uint64_t seed) {
  if (records.size() < 2) throw ValidationError("probe report needs at least two records");
  if (originals.size() != records.size() || generated.size() != records.size())
    throw ValidationError("one original and one generated embedding per record are required");
  ProbeReport rep;
  rep.n_pieces = records.size();
  rep.seed = seed;
  std::vector<double> dists;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& r = records[i];
    if (r.error) {
      ++rep.n_failed;
      r.embedding_distance.reset();
      continue;
    }
    rep.exact_match_count += r.exact_match ? 1 : 0;
    r.embedding_distance = cosine_distance(generated[i], originals[i]);
    dists.push_back(*r.embedding_distance);
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  rep.mean_distance = dists.empty() ? nan : stats::mean(dists);
  rep.median_distance = dists.empty() ? nan : stats::quantile(dists, 0.5);
  const auto pairs = baseline_pairs(records.size(), seed);
  double s = 0.0;
  for (const auto& [i, j] : pairs) s += cosine_distance(originals[i], originals[j]);
  rep.baseline_pairs = pairs.size();
  rep.random_pair_baseline = s / static_cast<double>(pairs.size());
  return rep;
}

/// Embeds originals and generated texts through the client, then reports.
inline ProbeReport probe_report(std::vector<CompletionRecord>& records, LlmClient& client, std::uint64_t seed) {
  std::vector<std::string> orig, gen;
  std::vector<std::size_t> gen_index;
  for (std::size_t i = 0; i < records.size(); ++i) {
    orig.push_back(original_full_text(records[i]));
    if (!records[i].error) {
      gen.push_back(generated_full_text(records[i]));
      gen_index.push_back(i);
    }
  }
  const auto eo = client.embed(orig);
  const auto eg = client.embed(gen);
  std::vector<Embedding> generated(records.size());
  for (std::size_t m = 0; m < gen_index.size(); ++m) generated[gen_index[m]] = eg[m];
  return probe_report(records, eo, generated, seed);
}

inline nlohmann::json to_json(const CompletionRecord& r) {
  nlohmann::json j;
  j["id"] = r.id;
  j["prefix"] = r.prefix;
  j["true_suffix"] = r.true_suffix;
  j["generated_suffix"] = r.generated_suffix;
  j["exact_match"] = r.exact_match;
  j["no_whitespace_split"] = r.no_whitespace_split;
  j["embedding_distance"] = r.embedding_distance ? nlohmann::json(*r.embedding_distance) : nlohmann::json();
  j["error"] = r.error ? nlohmann::json(*r.error) : nlohmann::json();
  return j;
}

inline nlohmann::json to_json(const ProbeReport& r) {
  auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(); };
  return {{"n_pieces", r.n_pieces},
          {"n_failed", r.n_failed},
          {"exact_match_count", r.exact_match_count},
          {"mean_distance", num(r.mean_distance)},
          {"median_distance", num(r.median_distance)},
          {"random_pair_baseline", num(r.random_pair_baseline)},
          {"baseline_pairs", r.baseline_pairs},
          {"seed", r.seed}};
}

}  // namespace safelabel

#endif
