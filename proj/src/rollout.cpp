#include "vlmr3/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <iostream>
#include <limits>
#include <numeric>

#include "vlmr3/toolcall.hpp"
#include "vlmr3/vision.hpp"

namespace vlmr3::rollout {
namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finaliser over a combined word.
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

}  // namespace

std::string_view to_string(PerturbKind kind) {
  return kind == PerturbKind::ReplaceRandom ? "replace_random" : "jitter";
}

PerturbKind parse_perturb_kind(std::string_view text) {
  if (text == "replace_random" || text == "REPLACE_RANDOM" || text == "replace") return PerturbKind::ReplaceRandom;
  if (text == "jitter" || text == "JITTER") return PerturbKind::Jitter;
  throw Error(ErrorCode::ConfigError, "unknown perturbation kind '" + std::string(text) + "'");
}

void PerturbSpec::validate() const {
  if (!(grounding_accuracy >= 0.0 && grounding_accuracy <= 1.0))
    throw Error(ErrorCode::ConfigError, "grounding accuracy must lie in [0, 1]");
  if (!(jitter >= 0.0)) throw Error(ErrorCode::ConfigError, "jitter magnitude must be >= 0");
}

GroundingPerturber::GroundingPerturber(PerturbSpec spec, std::uint64_t stream)
    : spec_(spec), rng_(mix_seed(spec.seed, stream)) {
  spec_.validate();
}

BBox GroundingPerturber::apply(const BBox& box, ImageDims dims, bool& changed) {
  changed = false;
  // Always draw, so the keep/alter decision for the n-th box is shared
  // across grounding-accuracy levels with the same seed.
  const double u = uniform01(rng_);
  if (u < spec_.grounding_accuracy) return box;

  if (spec_.kind == PerturbKind::ReplaceRandom) {
    if (dims.width < 1 || dims.height < 1 || (dims.width == 1 && dims.height == 1)) return box;
    for (int attempt = 0; attempt < 64; ++attempt) {
      int x1 = uniform_int(rng_, 0, dims.width), x2 = uniform_int(rng_, 0, dims.width);
      int y1 = uniform_int(rng_, 0, dims.height), y2 = uniform_int(rng_, 0, dims.height);
      if (x1 == x2 || y1 == y2) continue;
      BBox out{std::min(x1, x2), std::min(y1, y2), std::max(x1, x2), std::max(y1, y2)};
      if (out == box) continue;
      changed = true;
      return out;
    }
    return box;
  }

  for (int attempt = 0; attempt < 64; ++attempt) {
    const double w = box.width(), h = box.height();
    const double cx = box.x1 + w / 2 + (2 * uniform01(rng_) - 1) * spec_.jitter * w;
    const double cy = box.y1 + h / 2 + (2 * uniform01(rng_) - 1) * spec_.jitter * h;
    const double s = std::max(0.05, 1.0 + (2 * uniform01(rng_) - 1) * spec_.jitter);
    try {
      BBox out = make_bbox(std::llround(cx - s * w / 2), std::llround(cy - s * h / 2),
                           std::llround(cx + s * w / 2), std::llround(cy + s * h / 2), dims);
      changed = out != box;
      return out;
    } catch (const Error&) {
    }
  }
  return box;
}

std::vector<CropAction> perturb_grounding(std::span<const CropAction> actions, const PerturbSpec& spec,
                                          ImageDims dims) {
  GroundingPerturber perturber(spec, 0);
  std::vector<CropAction> out(actions.begin(), actions.end());
  for (auto& a : out) {
    if (!a.bbox) continue;
    bool changed = false;
    const BBox b = perturber.apply(*a.bbox, dims, changed);
    a.bbox = b;
    a.executed_bbox = b;
    a.perturbed = changed;
  }
  return out;
}

void EpisodeConfig::validate() const {
  if (max_crop_turns < 0) throw Error(ErrorCode::ConfigError, "max_crop_turns must be >= 0");
  if (max_total_tokens == 0) throw Error(ErrorCode::ConfigError, "max_total_tokens must be positive");
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw Error(ErrorCode::ConfigError, "iou threshold must be in (0, 1]");
  if (perturb) perturb->validate();
}

Trajectory run_episode(PolicyBackend& backend, const EpisodeInput& input, const EpisodeConfig& config,
                       const SamplingConfig& sampling) {
  config.validate();
  const bool interleaved = config.injection_mode == InjectionMode::Interleaved;
  if (interleaved && !backend.capabilities().can_inject_images)
    throw Error(ErrorCode::ConfigError, "interleaved mode needs a backend that accepts images");

  auto session = backend.start(input, sampling);
  Trajectory traj;
  traj.question_id = input.question_id;
  traj.seed = sampling.seed;
  traj.injection_mode = config.injection_mode;
  const ImageDims dims = input.image.dims();

  std::optional<GroundingPerturber> perturber;
  if (config.perturb) perturber.emplace(*config.perturb, sampling.seed);

  struct Intercepted {
    CharSpan span;
    std::optional<BBox> executed_box;
    bool executed = false;
    bool perturbed = false;
    int injected_segment = -1;
  };
  std::vector<Intercepted> intercepted;
  int accepted_crops = 0;
  bool intercepting = config.max_crop_turns > 0;

  while (true) {
    const std::size_t used = traj.token_ids.size();
    if (used >= config.max_total_tokens) {
      traj.token_budget_hit = true;
      break;
    }
    const std::size_t chunk_start = traj.transcript.size();
    const StopPredicate stop = [&](std::string_view chunk) {
      if (chunk.ends_with(toolcall::kAnswerClose)) return true;
      return intercepting && toolcall::trailing_crop_command(chunk).has_value();
    };
    Generation gen = session->generate_until(stop, config.max_total_tokens - used);

    if (!gen.token_ids.empty()) {
      Segment seg;
      seg.kind = SegmentKind::ModelText;
      seg.token_span = {used, used + gen.token_ids.size()};
      seg.char_span = {chunk_start, chunk_start + gen.text.size()};
      traj.segments.push_back(std::move(seg));
      traj.transcript += gen.text;
      traj.token_ids.insert(traj.token_ids.end(), gen.token_ids.begin(), gen.token_ids.end());
      traj.token_logprobs.insert(traj.token_logprobs.end(), gen.logprobs.begin(), gen.logprobs.end());
    }
    if (gen.reason == StopReason::TokenBudget) {
      traj.token_budget_hit = true;
      break;
    }
    if (gen.reason == StopReason::EndOfSequence || gen.token_ids.empty()) break;
    if (gen.text.ends_with(toolcall::kAnswerClose)) break;

    const auto cmd = toolcall::trailing_crop_command(gen.text);
    if (!cmd) break;
    Intercepted rec;
    rec.span = {chunk_start + cmd->span.begin, chunk_start + cmd->span.end};
    std::optional<BBox> box;
    try {
      box = make_bbox(cmd->coords[0], cmd->coords[1], cmd->coords[2], cmd->coords[3], dims);
    } catch (const Error&) {
    }
    if (box && toolcall::inside_open_think(traj.transcript, rec.span.begin)) {
      BBox exec = *box;
      if (perturber) exec = perturber->apply(*box, dims, rec.perturbed);
      rec.executed_box = exec;
      if (interleaved) {
        RegionEvidence ev = vision::make_region_evidence(input.image, exec);
        const int n = session->inject_image(ev);
        if (n < 0) throw Error(ErrorCode::BackendFailure, "backend reported a negative injection length");
        const std::size_t begin = traj.token_ids.size();
        Segment seg;
        seg.kind = SegmentKind::InjectedImage;
        seg.token_span = {begin, begin + static_cast<std::size_t>(n)};
        seg.region = std::move(ev);
        rec.injected_segment = static_cast<int>(traj.segments.size());
        traj.segments.push_back(std::move(seg));
        traj.token_ids.insert(traj.token_ids.end(), static_cast<std::size_t>(n), kInjectedToken);
        traj.token_logprobs.insert(traj.token_logprobs.end(), static_cast<std::size_t>(n),
                                   std::numeric_limits<double>::quiet_NaN());
        rec.executed = true;
      }
      if (++accepted_crops >= config.max_crop_turns) intercepting = false;
    }
    intercepted.push_back(rec);
  }

  toolcall::ParseOptions opts;
  opts.frame = dims;
  opts.iou_threshold = config.iou_threshold;
  auto parsed = toolcall::parse_transcript(traj.transcript, opts);
  traj.think_text = std::move(parsed.think_text);
  traj.answer_text = std::move(parsed.answer_text);
  traj.format_ok = parsed.format_ok;
  traj.crop_actions = std::move(parsed.crop_commands);

  for (std::size_t i = 0; i < traj.crop_actions.size(); ++i) {
    auto& action = traj.crop_actions[i];
    const auto it = std::find_if(intercepted.begin(), intercepted.end(),
                                 [&](const Intercepted& r) { return r.span == action.char_span; });
    if (it == intercepted.end()) {
      if (action.valid) traj.crop_budget_hit = true;
      continue;
    }
    action.executed = it->executed;
    action.executed_bbox = it->executed_box;
    action.perturbed = it->perturbed;
    if (it->injected_segment >= 0)
      traj.segments[static_cast<std::size_t>(it->injected_segment)].crop_index = static_cast<int>(i);
  }
  return traj;
}

std::optional<GroupBatch> run_group(PolicyBackend& backend, std::shared_ptr<const EpisodeInput> input,
                                    const std::string& ground_truth, const GroupConfig& config,
                                    std::size_t* failed_episodes) {
  if (config.group_size < 2) throw Error(ErrorCode::GroupTooSmall, "group size must be >= 2");
  const auto episode = [&](int i) {
    SamplingConfig s;
    s.seed = mix_seed(config.seed, static_cast<std::uint64_t>(i));
    s.temperature = config.temperature;
    return run_episode(backend, *input, config.episode, s);
  };

  std::vector<std::optional<Trajectory>> slots(static_cast<std::size_t>(config.group_size));
  std::size_t failed = 0;
  const auto collect = [&](int i, auto&& produce) {
    try {
      slots[static_cast<std::size_t>(i)] = produce();
    } catch (const Error& e) {
      if (e.code() != ErrorCode::BackendFailure) throw;
      ++failed;
      std::clog << "episode " << i << " of " << input->question_id << " failed: " << e.what() << '\n';
    }
  };
  if (config.parallel && backend.capabilities().concurrent_safe) {
    std::vector<std::future<Trajectory>> futures;
    for (int i = 0; i < config.group_size; ++i) futures.push_back(std::async(std::launch::async, episode, i));
    for (int i = 0; i < config.group_size; ++i) collect(i, [&] { return futures[static_cast<std::size_t>(i)].get(); });
  } else {
    for (int i = 0; i < config.group_size; ++i) collect(i, [&] { return episode(i); });
  }
  if (failed_episodes) *failed_episodes += failed;

  GroupBatch batch;
  batch.question_id = input->question_id;
  batch.input = input;
  batch.ground_truth = ground_truth;
  for (auto& slot : slots)
    if (slot) batch.trajectories.push_back(std::move(*slot));
  if (batch.trajectories.size() < 2) {
    std::clog << "discarding group " << input->question_id << ": " << batch.trajectories.size()
              << " completed episodes\n";
    return std::nullopt;
  }
  std::vector<double> rewards;
  for (auto& t : batch.trajectories) rewards.push_back(rewards::total_reward(t, ground_truth, config.judge).total);
  batch.advantages = rgrpo::normalize_advantages(rewards);
  return batch;
}

BatchLoss compute_batch_loss(const TrainableBackend& backend, std::span<const GroupBatch> groups, double beta,
                             const ScoreOptions& options) {
  BatchLoss out;
  std::vector<rgrpo::ScoredGroup> scored;
  for (const auto& g : groups) {
    if (!g.advantages || !g.input) throw Error(ErrorCode::InvalidArgument, "group is missing advantages or input");
    rgrpo::ScoredGroup sg;
    sg.advantages = *g.advantages;
    sg.logp_ref.emplace();
    auto& masks = out.masks.emplace_back();
    auto& lps = out.logprobs.emplace_back();
    for (const auto& t : g.trajectories) {
      auto lp = backend.score_sequence(*g.input, t, options);
      auto mask = rgrpo::action_mask(t);
      sg.logp_theta.push_back(rgrpo::masked_sum(lp.current, mask));
      sg.logp_ref->push_back(rgrpo::masked_sum(lp.reference, mask));
      masks.push_back(std::move(mask));
      lps.push_back(std::move(lp));
    }
    scored.push_back(std::move(sg));
  }
  out.loss = rgrpo::rgrpo_loss(scored, beta);
  return out;
}

rgrpo::StepMetrics train_step(TrainableBackend& backend, std::span<const GroupBatch> groups, double beta) {
  rgrpo::StepMetrics m;
  if (groups.empty()) {
    m.parameter_version = backend.version();
    return m;
  }
  const BatchLoss batch = compute_batch_loss(backend, groups, beta);
  if (!std::isfinite(batch.loss.value))
    throw Error(ErrorCode::NonFiniteGradient, "loss is not finite; step aborted");

  std::vector<double> grad(backend.parameter_count(), 0.0);
  std::vector<double> advantages;
  std::size_t crop_actions = 0, valid_crops = 0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& group = groups[g];
    for (std::size_t i = 0; i < group.trajectories.size(); ++i) {
      const auto& t = group.trajectories[i];
      const auto& mask = batch.masks[g][i];
      std::vector<double> weights(mask.size(), 0.0);
      const double c = batch.loss.dlogp[g][i];
      for (std::size_t k = 0; k < mask.size(); ++k) weights[k] = mask[k] ? c : 0.0;
      backend.accumulate_gradient(*group.input, t, weights, grad);

      const RewardBreakdown r = t.reward.value_or(RewardBreakdown{});
      m.mean_reward += r.total;
      m.mean_accuracy += r.accuracy;
      m.mean_format += r.format;
      m.mean_validity += r.validity;
      m.mean_length += r.length;
      crop_actions += t.crop_actions.size();
      valid_crops += t.valid_crop_count();
      ++m.trajectories;
    }
    advantages.insert(advantages.end(), group.advantages->begin(), group.advantages->end());
  }
  m.parameter_version = backend.apply_update(grad);

  const double n = static_cast<double>(m.trajectories);
  m.mean_reward /= n;
  m.mean_accuracy /= n;
  m.mean_format /= n;
  m.mean_validity /= n;
  m.mean_length /= n;
  const double amean = std::accumulate(advantages.begin(), advantages.end(), 0.0) / advantages.size();
  double ss = 0.0;
  for (double a : advantages) ss += (a - amean) * (a - amean);
  m.advantage_std = std::sqrt(ss / advantages.size());
  m.loss = batch.loss.value;
  m.kl_mean = batch.loss.kl_mean;
  m.valid_crop_rate = crop_actions ? static_cast<double>(valid_crops) / crop_actions : 0.0;
  m.groups = groups.size();
  return m;
}

nlohmann::json to_json(const EvalReport& r) {
  return {{"samples", r.samples},         {"failures", r.failures},       {"accuracy", r.accuracy},
          {"mean_crops", r.mean_crops},   {"format_rate", r.format_rate}, {"mean_think_length", r.mean_think_length}};
}

EvalReport evaluate(PolicyBackend& backend, std::span<const EvalItem> dataset, const EpisodeConfig& config,
                    std::uint64_t seed, rewards::JudgeConfig judge) {
  if (dataset.empty()) throw Error(ErrorCode::InvalidArgument, "evaluation dataset is empty");
  EvalReport r;
  r.samples = dataset.size();
  double correct = 0.0, crops = 0.0, formatted = 0.0, think = 0.0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    SamplingConfig s;
    s.seed = mix_seed(seed, i);
    s.greedy = true;
    try {
      Trajectory t = run_episode(backend, *dataset[i].input, config, s);
      const auto reward = rewards::total_reward(t, dataset[i].ground_truth, judge);
      correct += reward.accuracy;
      crops += static_cast<double>(t.crop_actions.size());
      formatted += reward.format;
      think += static_cast<double>(rewards::code_point_count(t.think_text.value_or("")));
    } catch (const Error& e) {
      ++r.failures;
      std::clog << "evaluation of " << dataset[i].input->question_id << " failed: " << e.what() << '\n';
    }
  }
  const double n = static_cast<double>(r.samples);
  r.accuracy = correct / n;
  r.mean_crops = crops / n;
  r.format_rate = formatted / n;
  r.mean_think_length = think / n;
  return r;
}

std::vector<SweepPoint> perturbation_sweep(PolicyBackend& backend, std::span<const EvalItem> dataset,
                                           const EpisodeConfig& config, std::span<const double> accuracies,
                                           PerturbKind kind, double jitter, std::uint64_t seed) {
  std::vector<SweepPoint> out;
  for (double p : accuracies) {
    EpisodeConfig c = config;
    c.perturb = PerturbSpec{p, kind, jitter, seed};
    out.push_back({p, evaluate(backend, dataset, c, seed)});
  }
  return out;
}

std::vector<double> run_sft(TrainableBackend& backend, std::span<const SftItem> items, int epochs,
                            const EpisodeConfig& config) {
  std::vector<double> losses;
  EpisodeConfig forced = config;
  forced.perturb.reset();
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (const auto& item : items) {
      SamplingConfig s;
      s.forced_text = item.transcript;
      const Trajectory t = run_episode(backend, *item.input, forced, s);
      const auto lp = backend.score_sequence(*item.input, t);
      const auto mask = rgrpo::action_mask(t);
      const double loss = rgrpo::sft_loss(lp.current, mask);
      if (!std::isfinite(loss)) throw Error(ErrorCode::NonFiniteGradient, "SFT loss is not finite");
      const double w = -1.0 / static_cast<double>(mask.count());
      std::vector<double> weights(mask.size());
      for (std::size_t k = 0; k < mask.size(); ++k) weights[k] = mask[k] ? w : 0.0;
      std::vector<double> grad(backend.parameter_count(), 0.0);
      backend.accumulate_gradient(*item.input, t, weights, grad);
      backend.apply_update(grad);
      losses.push_back(loss);
    }
  }
  return losses;
}

TrainResult run_rgrpo(TrainableBackend& backend, const QuestionSampler& sampler, const TrainConfig& config,
                      std::span<const EvalItem> eval_set, const StepCallback& on_step) {
  TrainResult result;
  const auto maybe_eval = [&](int step) {
    if (eval_set.empty() || config.eval_every <= 0) return;
    if (step % config.eval_every != 0 && step != config.steps) return;
    result.evals.emplace_back(step, evaluate(backend, eval_set, config.group.episode, config.group.seed));
  };

  for (int step = 0; step < config.steps; ++step) {
    maybe_eval(step);
    std::vector<GroupBatch> groups;
    for (int g = 0; g < config.groups_per_step; ++g) {
      const auto index = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(config.groups_per_step) +
                         static_cast<std::uint64_t>(g);
      auto [input, truth] = sampler(index);
      GroupConfig gc = config.group;
      gc.seed = mix_seed(config.group.seed, index);
      if (auto batch = run_group(backend, input, truth, gc)) groups.push_back(std::move(*batch));
    }
    auto m = train_step(backend, groups, config.beta);
    m.step = step;
    if (on_step) on_step(m);
    result.metrics.push_back(std::move(m));
  }
  maybe_eval(config.steps);
  return result;
}

namespace {

nlohmann::json box_json(const BBox& b) { return {b.x1, b.y1, b.x2, b.y2}; }

}  // namespace

nlohmann::json to_json(const Trajectory& t) {
  nlohmann::json segments = nlohmann::json::array();
  for (const auto& s : t.segments) {
    nlohmann::json j = {{"kind", s.kind == SegmentKind::ModelText ? "model_text" : "injected_image"},
                        {"tokens", {s.token_span.begin, s.token_span.end}}};
    if (s.kind == SegmentKind::ModelText) j["chars"] = {s.char_span.begin, s.char_span.end};
    if (s.region)
      j["region"] = {{"bbox", box_json(s.region->source)},
                     {"area_ratio", s.region->area_ratio},
                     {"scale", s.region->scale},
                     {"width", s.region->width},
                     {"height", s.region->height},
                     {"crop_index", s.crop_index}};
    segments.push_back(std::move(j));
  }
  nlohmann::json crops = nlohmann::json::array();
  for (const auto& a : t.crop_actions) {
    nlohmann::json j = {{"raw", a.raw_text},
                        {"requested", a.requested},
                        {"chars", {a.char_span.begin, a.char_span.end}},
                        {"turn", a.turn_index},
                        {"inside_think", a.inside_think},
                        {"valid", a.valid},
                        {"redundant", a.redundant},
                        {"executed", a.executed},
                        {"perturbed", a.perturbed}};
    j["bbox"] = a.bbox ? box_json(*a.bbox) : nlohmann::json(nullptr);
    j["executed_bbox"] = a.executed_bbox ? box_json(*a.executed_bbox) : nlohmann::json(nullptr);
    crops.push_back(std::move(j));
  }
  nlohmann::json j = {{"question_id", t.question_id},
                      {"seed", t.seed},
                      {"injection_mode", to_string(t.injection_mode)},
                      {"transcript", t.transcript},
                      {"token_count", t.token_ids.size()},
                      {"format_ok", t.format_ok},
                      {"token_budget_hit", t.token_budget_hit},
                      {"crop_budget_hit", t.crop_budget_hit},
                      {"segments", segments},
                      {"crops", crops}};
  j["think_text"] = t.think_text ? nlohmann::json(*t.think_text) : nlohmann::json(nullptr);
  j["answer_text"] = t.answer_text ? nlohmann::json(*t.answer_text) : nlohmann::json(nullptr);
  if (t.reward)
    j["rewards"] = {{"accuracy", t.reward->accuracy},
                    {"format", t.reward->format},
                    {"validity", t.reward->validity},
                    {"length", t.reward->length},
                    {"total", t.reward->total}};
  return j;
}

nlohmann::json to_json(const GroupBatch& g) {
  nlohmann::json trajectories = nlohmann::json::array();
  for (const auto& t : g.trajectories) trajectories.push_back(to_json(t));
  nlohmann::json j = {{"question_id", g.question_id}, {"ground_truth", g.ground_truth}, {"trajectories", trajectories}};
  j["advantages"] = g.advantages ? nlohmann::json(*g.advantages) : nlohmann::json(nullptr);
  return j;
}

}  // namespace vlmr3::rollout
