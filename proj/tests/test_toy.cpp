#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <map>
#include <set>

#include "support.hpp"
#include "vlmr3/rollout.hpp"
#include "vlmr3/toy.hpp"

using namespace vlmr3;
using namespace vlmr3::toy;

namespace {

std::vector<Trajectory> sample_episodes(ToyPolicy& policy, const EpisodeInput& in, int n, std::uint64_t seed) {
  std::vector<Trajectory> out;
  for (int i = 0; i < n; ++i) {
    SamplingConfig s;
    s.seed = seed + static_cast<std::uint64_t>(i);
    out.push_back(rollout::run_episode(policy, in, {}, s));
  }
  return out;
}

GroupBatch make_group(ToyPolicy& policy, const Sample& sample, std::uint64_t seed) {
  GroupBatch g;
  g.input = fixtures::toy_input(sample);
  g.question_id = sample.id;
  g.ground_truth = sample.answer;
  g.trajectories = sample_episodes(policy, *g.input, 4, seed);
  // Fixed advantages keep the check independent of sampled rewards.
  g.advantages = std::vector<double>{1.2, -0.4, 0.3, -1.1};
  return g;
}

}  // namespace

TEST(Vocabulary, RoundTripAndRejectsForeignText) {
  TaskConfig cfg;
  Vocabulary v(cfg);
  EXPECT_EQ(v.size(), 6u + 8u + 9u);
  const auto samples = make_split(cfg, 1, 9, "v");
  for (const auto& s : samples) {
    const std::string text = oracle_transcript(cfg, s);
    const auto ids = v.encode(text);
    EXPECT_EQ(v.decode(ids), text);
    EXPECT_EQ(ids.size(), 8u);
  }
  try {
    v.encode("<think>hello");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::AlignmentError);
  }
}

TEST(Patterns, HalfLitAndDistinct) {
  std::set<std::uint16_t> seen;
  for (int k = 0; k < kMaxSymbols; ++k) {
    EXPECT_EQ(std::popcount(symbol_pattern(k)), 8) << k;
    seen.insert(symbol_pattern(k));
  }
  EXPECT_EQ(seen.size(), static_cast<std::size_t>(kMaxSymbols));
  EXPECT_THROW(symbol_pattern(8), Error);
}

TEST(Features, CoarseViewIgnoresSymbols) {
  TaskConfig cfg;
  const Sample a = render_sample(cfg, "a", 4, {0, 1, 2, 3, 4, 5, 6, 7, 0});
  const Sample b = render_sample(cfg, "b", 4, {7, 7, 7, 7, 1, 7, 7, 7, 7});
  EXPECT_EQ(coarse_features(cfg, a.image), coarse_features(cfg, b.image));
  EXPECT_EQ(brightest_cell(cfg, a.image), 4);
  EXPECT_NE(a.answer, b.answer);
}

TEST(Features, DecodeReadsEveryCell) {
  TaskConfig cfg;
  const auto samples = make_split(cfg, 3, 72, "d");
  for (const auto& s : samples)
    for (int c = 0; c < cfg.cells(); ++c)
      EXPECT_EQ(decode_symbol(cfg, vision::crop(s.image, cell_box(cfg, c))), s.symbols[static_cast<std::size_t>(c)]);
}

TEST(Split, BalancedOverCellsAndSymbols) {
  TaskConfig cfg;
  const auto samples = make_split(cfg, 9, 720, "s");
  std::map<std::pair<int, std::string>, int> counts;
  for (const auto& s : samples) {
    ++counts[{s.highlighted, s.answer}];
    EXPECT_EQ(symbol_name(s.symbols[static_cast<std::size_t>(s.highlighted)]), s.answer);
  }
  EXPECT_EQ(counts.size(), 72u);
  for (const auto& [k, n] : counts) EXPECT_EQ(n, 10);
  EXPECT_EQ(make_split(cfg, 9, 5, "s")[3].image, samples[3].image);
}

TEST(Oracle, ScoresPerfectly) {
  TaskConfig cfg;
  CropOracle oracle(cfg);
  std::vector<rollout::EvalItem> items;
  for (const auto& s : make_split(cfg, 2, 72, "o")) items.push_back({fixtures::toy_input(s), s.answer});
  const auto report = rollout::evaluate(oracle, items, {});
  EXPECT_EQ(report.accuracy, 1.0);
  EXPECT_EQ(report.mean_crops, 1.0);
  EXPECT_EQ(report.format_rate, 1.0);
}

TEST(ToyPolicy, ScoreMatchesGenerationLogprobs) {
  TaskConfig cfg;
  toy::PolicyConfig pc;
  pc.init_scale = 0.5;
  ToyPolicy policy(cfg, pc);
  for (const auto& s : make_split(cfg, 4, 6, "g")) {
    const auto in = fixtures::toy_input(s);
    for (const auto& t : sample_episodes(policy, *in, 3, 100)) {
      const auto lp = policy.score_sequence(*in, t);
      ASSERT_EQ(lp.current.size(), t.token_ids.size());
      for (std::size_t k = 0; k < t.token_ids.size(); ++k) {
        EXPECT_EQ(lp.current[k], lp.reference[k]);
        if (t.token_ids[k] == kInjectedToken) {
          EXPECT_TRUE(std::isnan(t.token_logprobs[k]));
          continue;
        }
        EXPECT_NEAR(lp.current[k], t.token_logprobs[k], 1e-6) << k;
      }
    }
  }
}

TEST(ToyPolicy, TeacherForcingReproducesTranscript) {
  TaskConfig cfg;
  ToyPolicy policy(cfg, toy::PolicyConfig{});
  const Sample s = make_split(cfg, 5, 1, "f")[0];
  const auto in = fixtures::toy_input(s);
  SamplingConfig sc;
  sc.forced_text = oracle_transcript(cfg, s);
  const auto t = rollout::run_episode(policy, *in, {}, sc);
  EXPECT_EQ(t.transcript, *sc.forced_text);
  EXPECT_EQ(t.injected_segment_count(), 1u);
  EXPECT_EQ(t.segments[1].token_span.size(), static_cast<std::size_t>(kFinePositions));
  EXPECT_EQ(*t.answer_text, s.answer);
}

TEST(ToyPolicy, GradientMatchesFiniteDifferences) {
  TaskConfig cfg;
  toy::PolicyConfig pc;
  pc.init_scale = 0.3;
  pc.init_seed = 11;
  ToyPolicy policy(cfg, pc);
  const auto samples = make_split(cfg, 6, 2, "fd");
  std::vector<GroupBatch> groups;
  for (std::size_t i = 0; i < samples.size(); ++i) groups.push_back(make_group(policy, samples[i], 50 * i));

  // Move away from the reference so the KL term is active.
  auto theta0 = policy.parameters();
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 0.05);
  for (double& p : theta0) p += n(rng);
  policy.set_parameters(theta0);

  for (double beta : {0.0, 0.04}) {
    policy.set_parameters(theta0);
    const auto batch = rollout::compute_batch_loss(policy, groups, beta);
    std::vector<double> grad(policy.parameter_count(), 0.0);
    for (std::size_t g = 0; g < groups.size(); ++g)
      for (std::size_t i = 0; i < groups[g].trajectories.size(); ++i) {
        const auto& mask = batch.masks[g][i];
        std::vector<double> w(mask.size(), 0.0);
        for (std::size_t k = 0; k < mask.size(); ++k) w[k] = mask[k] ? batch.loss.dlogp[g][i] : 0.0;
        policy.accumulate_gradient(*groups[g].input, groups[g].trajectories[i], w, grad);
      }

    std::vector<rgrpo::ScoredGroup> frozen;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      rgrpo::ScoredGroup sg;
      sg.advantages = *groups[g].advantages;
      sg.logp_detached.emplace();
      sg.logp_ref.emplace();
      for (std::size_t i = 0; i < groups[g].trajectories.size(); ++i) {
        const auto& lp = batch.logprobs[g][i];
        sg.logp_detached->push_back(rgrpo::masked_sum(lp.current, batch.masks[g][i]));
        sg.logp_ref->push_back(rgrpo::masked_sum(lp.reference, batch.masks[g][i]));
      }
      frozen.push_back(std::move(sg));
    }
    const auto loss_at = [&](const std::vector<double>& params) {
      policy.set_parameters(params);
      auto scored = frozen;
      for (std::size_t g = 0; g < groups.size(); ++g)
        for (std::size_t i = 0; i < groups[g].trajectories.size(); ++i) {
          const auto lp = policy.score_sequence(*groups[g].input, groups[g].trajectories[i]);
          scored[g].logp_theta.push_back(rgrpo::masked_sum(lp.current, batch.masks[g][i]));
        }
      return rgrpo::rgrpo_loss(scored, beta).value;
    };

    EXPECT_NEAR(loss_at(theta0), batch.loss.value, 1e-12);
    std::size_t checked = 0;
    for (std::size_t p = 0; p < theta0.size(); p += 7) {
      const double h = 1e-5;
      auto plus = theta0, minus = theta0;
      plus[p] += h;
      minus[p] -= h;
      const double fd = (loss_at(plus) - loss_at(minus)) / (2 * h);
      EXPECT_NEAR(grad[p], fd, 1e-7 + 1e-5 * std::abs(fd)) << "param " << p << " beta " << beta;
      ++checked;
    }
    EXPECT_GT(checked, 20u);
  }
}

TEST(ToyPolicy, InjectedPositionsCarryNoLoss) {
  TaskConfig cfg;
  toy::PolicyConfig pc;
  pc.init_scale = 0.3;
  ToyPolicy policy(cfg, pc);
  const Sample s = make_split(cfg, 7, 1, "inj")[0];
  GroupBatch g;
  g.input = fixtures::toy_input(s);
  SamplingConfig sc;
  sc.forced_text = oracle_transcript(cfg, s);
  for (int i = 0; i < 2; ++i) g.trajectories.push_back(rollout::run_episode(policy, *g.input, {}, sc));
  g.advantages = std::vector<double>{1.0, -1.0};
  const std::vector<GroupBatch> groups{g};
  const auto base = rollout::compute_batch_loss(policy, groups, 0.04);
  ScoreOptions shifted;
  shifted.injected_logit_shift = 3.0;
  const auto moved = rollout::compute_batch_loss(policy, groups, 0.04, shifted);
  EXPECT_NE(base.logprobs[0][0].current[5], moved.logprobs[0][0].current[5]);
  EXPECT_EQ(base.loss.value, moved.loss.value);
  EXPECT_EQ(base.loss.dlogp, moved.loss.dlogp);
}

TEST(ToyPolicy, ApplyUpdate) {
  TaskConfig cfg;
  ToyPolicy policy(cfg, toy::PolicyConfig{});
  const auto before = policy.parameters();
  EXPECT_EQ(policy.apply_update(std::vector<double>(before.size(), 0.0)), 1u);
  EXPECT_EQ(policy.parameters(), before);

  policy.set_learning_rate(0.0);
  EXPECT_EQ(policy.apply_update(std::vector<double>(before.size(), 1.0)), 2u);
  EXPECT_EQ(policy.parameters(), before);

  policy.set_learning_rate(0.5);
  std::vector<double> g(before.size(), 0.0);
  g[3] = 2.0;
  policy.apply_update(g);
  EXPECT_DOUBLE_EQ(policy.parameters()[3], before[3] - 1.0);

  g[0] = std::nan("");
  try {
    policy.apply_update(g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteGradient);
  }
  EXPECT_EQ(policy.version(), 3u);
}

TEST(ToyPolicy, Deterministic) {
  TaskConfig cfg;
  toy::PolicyConfig pc;
  pc.init_scale = 0.5;
  ToyPolicy a(cfg, pc), b(cfg, pc);
  EXPECT_EQ(a.parameters(), b.parameters());
  const auto in = fixtures::toy_input(make_split(cfg, 8, 1, "det")[0]);
  const auto ta = sample_episodes(a, *in, 4, 9), tb = sample_episodes(b, *in, 4, 9);
  for (std::size_t i = 0; i < ta.size(); ++i) {
    EXPECT_EQ(ta[i].transcript, tb[i].transcript);
    EXPECT_EQ(ta[i].token_ids, tb[i].token_ids);
  }
}

TEST(ToyPolicy, CheckpointRoundTrip) {
  TaskConfig cfg;
  ToyPolicy a(cfg, toy::PolicyConfig{});
  std::vector<double> g(a.parameter_count(), 0.01);
  a.apply_update(g);
  const auto j = a.checkpoint();
  toy::PolicyConfig other;
  other.init_seed = 99;
  ToyPolicy b(cfg, other);
  b.load_checkpoint(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(b.parameters(), a.parameters());
  EXPECT_EQ(b.version(), a.version());

  TaskConfig bigger;
  bigger.grid = 4;
  ToyPolicy c(bigger, toy::PolicyConfig{});
  try {
    c.load_checkpoint(j);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SchemaViolation);
  }
}

TEST(Fixture, DescriptorJson) {
  FixtureDescriptor d;
  d.seed = 17;
  d.train_size = 720;
  d.eval_size = 72;
  const auto j = to_json(d);
  EXPECT_EQ(j["G"], 3);
  EXPECT_EQ(j["K"], 8);
  const auto back = fixture_from_json(j);
  EXPECT_EQ(back.seed, 17u);
  EXPECT_EQ(back.eval_size, 72u);
  auto broken = j;
  broken.erase("K");
  try {
    fixture_from_json(broken);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SchemaViolation);
  }
}

TEST(TaskConfig, Validation) {
  TaskConfig c;
  c.cell = 18;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.symbols = 9;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.grid = 1;
  c.cell = 4;
  EXPECT_THROW(c.validate(), Error);
}
