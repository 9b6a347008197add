#include <gtest/gtest.h>

#include <filesystem>

#include "safelabel/mock_server.hpp"
#include "safelabel/probe.hpp"

using namespace safelabel;

namespace {

Population text_pop(std::size_t n) {
  std::vector<TextPiece> pieces;
  for (std::size_t i = 0; i < n; ++i) {
    TextPiece p;
    p.id = "bill" + std::to_string(i);
    p.w = {1.0};
    p.v_true = 0.0;
    p.text = "Section " + std::to_string(i) + " of the act amends clause " + std::to_string(i * 7 % 13) +
             " regarding appropriations for fiscal year " + std::to_string(1990 + i % 30);
    pieces.push_back(p);
  }
  return Population(pieces);
}

double cosine_oracle(const Embedding& a, const Embedding& b) {
  long double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += (long double)a[i] * b[i];
    aa += (long double)a[i] * a[i];
    bb += (long double)b[i] * b[i];
  }
  return double(1.0L - ab / std::sqrt(aa * bb));
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("safelabel_probe_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST(Probe, SplitAtNearestWhitespaceRun) {
  const auto s = split_text("alpha beta  gamma delta", 0.5);
  EXPECT_EQ(s.prefix + s.separator + s.suffix, "alpha beta  gamma delta");
  EXPECT_EQ(s.prefix, "alpha beta");
  EXPECT_EQ(s.separator, "  ");
  EXPECT_EQ(s.suffix, "gamma delta");
  EXPECT_FALSE(s.no_whitespace);
}

TEST(Probe, SplitIgnoresEdgeWhitespaceAndCountsCodePoints) {
  const auto s = split_text("  \xC3\xA9\xC3\xA9\xC3\xA9\xC3\xA9  ", 0.5);
  EXPECT_TRUE(s.no_whitespace);
  EXPECT_EQ(s.prefix + s.suffix, "  \xC3\xA9\xC3\xA9\xC3\xA9\xC3\xA9  ");
  EXPECT_EQ(s.prefix, "  \xC3\xA9\xC3\xA9");  // 4 of 8 code points
  EXPECT_THROW(split_text("", 0.5), ValidationError);
  EXPECT_THROW(split_text("a b", 1.0), ValidationError);
}

TEST(Probe, ExactMatchTrimsOuterWhitespaceOnly) {
  EXPECT_TRUE(exact_match("  the end\n", "the end"));
  EXPECT_FALSE(exact_match("the  end", "the end"));
  EXPECT_FALSE(exact_match("The end", "the end"));
}

TEST(Probe, PromptTemplate) {
  EXPECT_EQ(render_prompt("Continue: {prefix}|{prefix}", "ab"), "Continue: ab|ab");
  EXPECT_THROW(render_prompt("no placeholder", "ab"), ValidationError);
}

TEST(Probe, Sha256KnownVectors) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Probe, CosineDistance) {
  EXPECT_NEAR(cosine_distance({1, 0}, {0, 1}), 1.0, 1e-15);
  EXPECT_NEAR(cosine_distance({1, 2}, {2, 4}), 0.0, 1e-15);
  EXPECT_NEAR(cosine_distance({1, 0}, {-1, 0}), 2.0, 1e-15);
  EXPECT_THROW(cosine_distance({1, 0}, {1, 0, 0}), ValidationError);
  EXPECT_THROW(cosine_distance({0, 0}, {1, 0}), NumericError);
}

TEST(Probe, BaselinePairs) {
  EXPECT_EQ(baseline_pairs(5, 1).size(), 10u);
  const auto big = baseline_pairs(100, 1);
  EXPECT_EQ(big.size(), 1000u);
  std::set<std::pair<std::size_t, std::size_t>> u(big.begin(), big.end());
  EXPECT_EQ(u.size(), 1000u);
  for (auto [i, j] : big) EXPECT_LT(i, j);
  EXPECT_EQ(baseline_pairs(100, 1), big);
  EXPECT_NE(baseline_pairs(100, 2), big);
}

TEST(Probe, EndToEndAgainstMockWithOracle) {
  const auto pop = text_pop(30);
  ProbeConfig cfg;
  cfg.seed = 4;
  const std::set<std::string> echo{"bill3", "bill7", "bill11", "bill20"};
  auto fixture = echo_fixture(pop, cfg, echo);
  MockLlmServer server(fixture);
  server.start();
  cfg.endpoint = server.base_url();
  cfg.cache_dir = fresh_dir("e2e");
  LlmClient client(cfg);
  auto records = run_probe(pop, cfg, client);
  const auto rep = probe_report(records, client, cfg.seed);
  EXPECT_EQ(rep.exact_match_count, 4u);
  EXPECT_EQ(rep.n_failed, 0u);
  EXPECT_EQ(rep.baseline_pairs, 30u * 29u / 2u);

  std::vector<double> d;
  std::vector<Embedding> orig;
  for (const auto& r : records) {
    const auto split = split_text(*pop[*pop.index_of(r.id)].text, 0.5);
    const std::string original = split.prefix + split.separator + split.suffix;
    const std::string generated =
        split.prefix + split.separator + (echo.count(r.id) ? split.suffix : fixture.default_completion);
    orig.push_back(hashed_embedding(original));
    d.push_back(cosine_oracle(hashed_embedding(generated), orig.back()));
    EXPECT_NEAR(*r.embedding_distance, d.back(), 1e-12);
    EXPECT_EQ(r.exact_match, echo.count(r.id) == 1);
  }
  double mean = 0;
  for (double x : d) mean += x;
  mean /= double(d.size());
  double base = 0;
  for (std::size_t i = 0; i < orig.size(); ++i)
    for (std::size_t j = i + 1; j < orig.size(); ++j) base += cosine_oracle(orig[i], orig[j]);
  base /= double(orig.size() * (orig.size() - 1) / 2);
  EXPECT_NEAR(rep.mean_distance, mean, 1e-12);
  EXPECT_NEAR(rep.random_pair_baseline, base, 1e-12);
  std::sort(d.begin(), d.end());
  EXPECT_NEAR(rep.median_distance, 0.5 * (d[14] + d[15]), 1e-12);

  // Warm cache: a fresh client issues no requests.
  const auto before = server.total_requests();
  LlmClient warm(cfg);
  auto again = run_probe(pop, cfg, warm);
  const auto rep2 = probe_report(again, warm, cfg.seed);
  EXPECT_EQ(warm.requests(), 0u);
  EXPECT_EQ(server.total_requests(), before);
  EXPECT_EQ(to_json(rep2), to_json(rep));
  server.stop();
  std::filesystem::remove_all(*cfg.cache_dir);
}

TEST(Probe, RetriesTransientFailures) {
  const auto pop = text_pop(5);
  MockFixture fixture;
  fixture.transient_failures = 2;
  MockLlmServer server(fixture);
  server.start();
  ProbeConfig cfg;
  cfg.endpoint = server.base_url();
  cfg.concurrency = 1;
  cfg.retry = {3, 1};
  LlmClient client(cfg);
  const auto records = run_probe(pop, cfg, client);
  for (const auto& r : records) EXPECT_FALSE(r.error.has_value());
  EXPECT_EQ(server.chat_requests(), 7u);
}

TEST(Probe, UnreachableEndpointAborts) {
  const auto pop = text_pop(5);
  ProbeConfig cfg;
  cfg.endpoint = "http://127.0.0.1:1/v1";
  cfg.retry = {1, 1};
  cfg.timeout_s = 2;
  LlmClient client(cfg);
  EXPECT_THROW(run_probe(pop, cfg, client), TransportError);
}

TEST(Probe, ConfigValidation) {
  ProbeConfig cfg;
  cfg.split_fraction = 0.0;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = {};
  cfg.prompt_template = "nothing";
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = {};
  cfg.endpoint = "ftp://x";
  EXPECT_THROW(LlmClient{cfg}, ValidationError);
}
