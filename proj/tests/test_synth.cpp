#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tagcot/distill.hpp"
#include "tagcot/synth.hpp"

using namespace tagcot;

TEST_CASE("extreme config: pi=1, c=1 makes edges and cues fully informative") {
  SynthConfig cfg;
  cfg.nodes = 400;
  cfg.fraud_rate = 0.3;
  cfg.relations = 2;
  cfg.mean_degree = {4};
  cfg.homophily = {1.0};
  cfg.cue_strength = 1.0;
  cfg.seed = 5;
  auto g = generate_graph(cfg);

  auto has_fraud_cue = [&](const std::string& text) {
    for (const auto& cue : fraud_cues()) {
      if (text.find(cue) != std::string::npos) return true;
    }
    return false;
  };
  for (std::uint32_t v = 0; v < g.num_nodes(); ++v) {
    CHECK(has_fraud_cue(g.node(v).text) == (g.node(v).label == 1));
    for (std::size_t r = 0; r < g.num_relations(); ++r) {
      for (auto u : g.neighbors(v, r)) {
        CHECK(g.node(u).label == g.node(v).label);
      }
    }
  }
}

TEST_CASE("label counts follow Bernoulli(rho) within three sigma") {
  SynthConfig cfg;
  cfg.nodes = 2000;
  cfg.fraud_rate = 0.3;
  cfg.seed = 7;
  auto g = generate_graph(cfg);
  std::size_t fraud = 0;
  for (std::uint32_t v = 0; v < g.num_nodes(); ++v) fraud += g.node(v).label == 1;
  const double mean = 0.3 * 2000;
  const double sigma = std::sqrt(2000 * 0.3 * 0.7);
  CHECK(std::abs(static_cast<double>(fraud) - mean) <= 3.0 * sigma);
}

TEST_CASE("empirical homophily tracks pi within 0.05") {
  SynthConfig cfg;
  cfg.nodes = 2000;
  cfg.fraud_rate = 0.3;
  cfg.relations = 2;
  cfg.mean_degree = {6};
  cfg.homophily = {0.8};
  cfg.seed = 11;
  auto g = generate_graph(cfg);
  for (std::size_t r = 0; r < g.num_relations(); ++r) {
    std::size_t same = 0, total = 0;
    for (std::uint32_t v = 0; v < g.num_nodes(); ++v) {
      for (auto u : g.neighbors(v, r)) {
        if (u <= v) continue;
        ++total;
        same += g.node(u).label == g.node(v).label;
      }
    }
    REQUIRE(total > 0);
    const double ratio = static_cast<double>(same) / static_cast<double>(total);
    CHECK(ratio == doctest::Approx(0.8).epsilon(0.0625));  // 0.8 +- 0.05
  }
}

TEST_CASE("generator determinism: identical config, identical bytes") {
  SynthConfig cfg;
  cfg.nodes = 300;
  cfg.seed = 13;
  auto a = generate_graph(cfg);
  auto b = generate_graph(cfg);
  CHECK(a.to_jsonl() == b.to_jsonl());
  cfg.seed = 14;
  CHECK(generate_graph(cfg).to_jsonl() != a.to_jsonl());
}

TEST_CASE("stratified splits and exact label counts") {
  SynthConfig cfg;
  cfg.nodes = 500;
  cfg.fraud_rate = 0.3;
  cfg.exact_label_counts = true;
  cfg.seed = 17;
  auto g = generate_graph(cfg);

  std::size_t fraud = 0;
  for (std::uint32_t v = 0; v < g.num_nodes(); ++v) fraud += g.node(v).label == 1;
  CHECK(fraud == 150);
  CHECK(g.split_ids(Split::kTrain).size() == 300);
  CHECK(g.split_ids(Split::kVal).size() == 100);
  CHECK(g.split_ids(Split::kTest).size() == 100);

  // per-class stratification
  for (int cls = 0; cls <= 1; ++cls) {
    std::size_t train_c = 0, total_c = 0;
    for (std::uint32_t v = 0; v < g.num_nodes(); ++v) {
      if (g.node(v).label != cls) continue;
      ++total_c;
      train_c += g.node(v).split == Split::kTrain;
    }
    CHECK(train_c == total_c * 6 / 10);
  }
}

TEST_CASE("regular construction has exactly the target degree everywhere") {
  auto g = make_regular_graph(100, 4, 1);
  for (std::uint32_t v = 0; v < g.num_nodes(); ++v) {
    CHECK(g.degree(v, 0) == 4);
  }
  auto g2 = make_regular_graph(60, 4, 2);
  for (std::uint32_t v = 0; v < g2.num_nodes(); ++v) {
    CHECK(g2.degree(v, 0) == 4);
    CHECK(g2.degree(v, 1) == 4);
  }
}

TEST_CASE("synthetic teacher accuracy endpoints and binomial middle") {
  SynthConfig cfg;
  cfg.nodes = 60;
  cfg.seed = 19;
  auto g = generate_graph(cfg);
  LabelVocab vocab;

  auto run = [&](double acc, int trials) {
    int match = 0;
    for (int t = 0; t < trials; ++t) {
      const auto v = static_cast<std::uint32_t>(t % g.num_nodes());
      const auto prompt = build_prompt(g, v, 2, vocab);
      const auto text = synthetic_teacher(prompt.text, *g.node(v).label, acc,
                                          1000 + static_cast<std::uint64_t>(t));
      const auto parsed = parse_prediction(text, vocab);
      REQUIRE(parsed.has_value());  // teacher output must always parse
      match += *parsed == *g.node(v).label;
    }
    return static_cast<double>(match) / trials;
  };

  CHECK(run(1.0, 200) == 1.0);
  CHECK(run(0.0, 200) == 0.0);
  const double rate = run(0.6, 1000);
  CHECK(rate == doctest::Approx(0.6).epsilon(0.067));  // 0.6 +- 0.04
}

TEST_CASE("teacher cites cue phrases that are actually in the prompt") {
  SynthConfig cfg;
  cfg.nodes = 80;
  cfg.cue_strength = 1.0;
  cfg.seed = 23;
  auto g = generate_graph(cfg);
  for (std::uint32_t v = 0; v < 20; ++v) {
    const auto prompt = build_prompt(g, v, 2, {});
    const auto text = synthetic_teacher(prompt.text, *g.node(v).label, 1.0, v);
    const auto open = text.find('"');
    if (open == std::string::npos) continue;  // generic phrasing path
    const auto close = text.find('"', open + 1);
    REQUIRE(close != std::string::npos);
    const auto cited = text.substr(open + 1, close - open - 1);
    CHECK(prompt.text.find(cited) != std::string::npos);
  }
}
