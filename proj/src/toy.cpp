#include "vlmr3/toy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "vlmr3/toolcall.hpp"
#include "vlmr3/vision.hpp"

namespace vlmr3::toy {

void TaskConfig::validate() const {
  if (grid < 1) throw Error(ErrorCode::ConfigError, "toy grid must be >= 1");
  if (cell < kPatternSide || cell % kPatternSide != 0)
    throw Error(ErrorCode::ConfigError, "toy cell size must be a positive multiple of 4");
  if (symbols < 2 || symbols > kMaxSymbols) throw Error(ErrorCode::ConfigError, "toy symbols must be in [2, 8]");
  const long long px = image_dims().pixels();
  if (px < kMinPixels || px > kMaxPixels)
    throw Error(ErrorCode::ConfigError, "toy image must already satisfy the pixel bounds");
}

std::string symbol_name(int symbol) {
  if (symbol < 0 || symbol >= kMaxSymbols) throw Error(ErrorCode::InvalidArgument, "symbol out of range");
  return std::string(1, static_cast<char>('A' + symbol));
}

std::uint16_t symbol_pattern(int symbol) {
  // Half-lit block patterns: halves, then alternating rows/columns.
  const auto rows = [](std::initializer_list<int> rs) {
    std::uint16_t m = 0;
    for (int r : rs)
      for (int c = 0; c < kPatternSide; ++c) m |= static_cast<std::uint16_t>(1u << (r * kPatternSide + c));
    return m;
  };
  const auto cols = [](std::initializer_list<int> cs) {
    std::uint16_t m = 0;
    for (int c : cs)
      for (int r = 0; r < kPatternSide; ++r) m |= static_cast<std::uint16_t>(1u << (r * kPatternSide + c));
    return m;
  };
  switch (symbol) {
    case 0: return rows({0, 1});
    case 1: return rows({2, 3});
    case 2: return cols({0, 1});
    case 3: return cols({2, 3});
    case 4: return rows({0, 2});
    case 5: return rows({1, 3});
    case 6: return cols({0, 2});
    case 7: return cols({1, 3});
    default: throw Error(ErrorCode::InvalidArgument, "symbol out of range");
  }
}

BBox cell_box(const TaskConfig& cfg, int cell) {
  const int r = cell / cfg.grid, c = cell % cfg.grid;
  return BBox{c * cfg.cell, r * cfg.cell, (c + 1) * cfg.cell, (r + 1) * cfg.cell};
}

Sample render_sample(const TaskConfig& cfg, std::string id, int highlighted, std::vector<int> symbols) {
  if (static_cast<int>(symbols.size()) != cfg.cells())
    throw Error(ErrorCode::InvalidArgument, "one symbol per cell required");
  if (highlighted < 0 || highlighted >= cfg.cells()) throw Error(ErrorCode::InvalidArgument, "bad highlighted cell");
  Sample s;
  s.id = std::move(id);
  s.highlighted = highlighted;
  s.image = Image(cfg.grid * cfg.cell, cfg.grid * cfg.cell, 1);
  const int block = cfg.cell / kPatternSide;
  for (int cell = 0; cell < cfg.cells(); ++cell) {
    const BBox box = cell_box(cfg, cell);
    const std::uint16_t pattern = symbol_pattern(symbols[static_cast<std::size_t>(cell)]);
    const int offset = cell == highlighted ? cfg.highlight_offset : 0;
    for (int y = box.y1; y < box.y2; ++y) {
      for (int x = box.x1; x < box.x2; ++x) {
        const int bit = ((y - box.y1) / block) * kPatternSide + (x - box.x1) / block;
        const int level = ((pattern >> bit) & 1u) ? cfg.on_level : cfg.off_level;
        s.image.at(x, y) = static_cast<std::uint8_t>(std::min(255, level + offset));
      }
    }
  }
  s.answer = symbol_name(symbols[static_cast<std::size_t>(highlighted)]);
  s.symbols = std::move(symbols);
  return s;
}

std::vector<Sample> make_split(const TaskConfig& cfg, std::uint64_t seed, std::size_t count,
                               const std::string& prefix) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const int pairs = cfg.cells() * cfg.symbols;
  std::vector<int> order(static_cast<std::size_t>(pairs));
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto slot = static_cast<int>(i % static_cast<std::size_t>(pairs));
    if (slot == 0) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
    }
    const int pair = order[static_cast<std::size_t>(slot)];
    const int highlighted = pair / cfg.symbols;
    std::vector<int> symbols(static_cast<std::size_t>(cfg.cells()));
    for (auto& s : symbols) s = static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.symbols));
    symbols[static_cast<std::size_t>(highlighted)] = pair % cfg.symbols;
    out.push_back(render_sample(cfg, prefix + "-" + std::to_string(i), highlighted, std::move(symbols)));
  }
  return out;
}

nlohmann::json to_json(const FixtureDescriptor& d) {
  return {{"G", d.task.grid},       {"K", d.task.symbols},        {"cell", d.task.cell},
          {"seed", d.seed},         {"train_size", d.train_size}, {"eval_size", d.eval_size}};
}

FixtureDescriptor fixture_from_json(const nlohmann::json& j) {
  try {
    FixtureDescriptor d;
    d.task.grid = j.at("G").get<int>();
    d.task.symbols = j.at("K").get<int>();
    d.task.cell = j.value("cell", d.task.cell);
    d.seed = j.at("seed").get<std::uint64_t>();
    d.train_size = j.at("train_size").get<std::size_t>();
    d.eval_size = j.at("eval_size").get<std::size_t>();
    d.task.validate();
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::SchemaViolation, std::string("fixture descriptor: ") + e.what());
  }
}

namespace {

// Mean intensity over a blocks x blocks grid laid over the image.
std::vector<double> block_pool(const Image& image, int blocks) {
  std::vector<double> out(static_cast<std::size_t>(blocks * blocks), 0.0);
  for (int by = 0; by < blocks; ++by) {
    const int y0 = by * image.height / blocks;
    const int y1 = std::max(y0 + 1, (by + 1) * image.height / blocks);
    for (int bx = 0; bx < blocks; ++bx) {
      const int x0 = bx * image.width / blocks;
      const int x1 = std::max(x0 + 1, (bx + 1) * image.width / blocks);
      double sum = 0.0;
      long n = 0;
      for (int y = y0; y < std::min(y1, image.height); ++y)
        for (int x = x0; x < std::min(x1, image.width); ++x)
          for (int c = 0; c < image.channels; ++c, ++n) sum += image.at(x, y, c);
      out[static_cast<std::size_t>(by * blocks + bx)] = n > 0 ? sum / (255.0 * n) : 0.0;
    }
  }
  return out;
}

void layer_norm(std::span<double> v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(v.size()));
  for (double& x : v) x = sd < 1e-9 ? 0.0 : (x - mean) / sd;
}

void softmax_inplace(std::vector<double>& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& l : logits) z += (l = std::exp(l - mx));
  for (double& l : logits) l /= z;
}

double log_softmax_at(const std::vector<double>& logits, std::size_t k) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  return logits[k] - mx - std::log(z);
}

}  // namespace

std::vector<double> coarse_features(const TaskConfig& cfg, const Image& image) {
  auto f = block_pool(image, cfg.grid);
  layer_norm(f);
  return f;
}

std::array<double, kFinePositions> fine_features(const Image& evidence) {
  const auto pooled = block_pool(evidence, kPatternSide);
  std::array<double, kFinePositions> f{};
  std::copy(pooled.begin(), pooled.end(), f.begin());
  layer_norm(f);
  return f;
}

int decode_symbol(const TaskConfig& cfg, const Image& evidence) {
  const auto f = fine_features(evidence);
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < cfg.symbols; ++k) {
    const std::uint16_t pattern = symbol_pattern(k);
    double score = 0.0;
    for (int b = 0; b < kFinePositions; ++b) score += ((pattern >> b) & 1u) ? f[b] : -f[b];
    if (score > best_score) {
      best_score = score;
      best = k;
    }
  }
  return best;
}

int brightest_cell(const TaskConfig& cfg, const Image& image) {
  const auto pooled = block_pool(image, cfg.grid);
  return static_cast<int>(std::max_element(pooled.begin(), pooled.end()) - pooled.begin());
}

namespace {
constexpr std::string_view kLookText = "Let me look closer. ";
constexpr std::string_view kDoneText = "I can answer now. ";
}  // namespace

std::string oracle_transcript(const TaskConfig& cfg, const Sample& sample) {
  return std::string(toolcall::kThinkOpen) + std::string(kLookText) +
         toolcall::format_crop_command(cell_box(cfg, sample.highlighted)) + std::string(kDoneText) +
         std::string(toolcall::kThinkClose) + std::string(toolcall::kAnswerOpen) + sample.answer +
         std::string(toolcall::kAnswerClose);
}

EpisodeInput make_input(const Sample& sample, std::string system_prompt) {
  EpisodeInput in;
  in.question_id = sample.id;
  in.image = vision::normalize_pixels(sample.image);
  in.question = std::string(kQuestion);
  in.system_prompt = std::move(system_prompt);
  return in;
}

// ---------------------------------------------------------------- vocabulary

Vocabulary::Vocabulary(const TaskConfig& cfg) : symbols_(cfg.symbols) {
  texts_ = {std::string(toolcall::kThinkOpen),  std::string(kLookText),
            std::string(kDoneText),             std::string(toolcall::kThinkClose),
            std::string(toolcall::kAnswerOpen), std::string(toolcall::kAnswerClose)};
  for (int k = 0; k < cfg.symbols; ++k) texts_.push_back(symbol_name(k));
  for (int c = 0; c < cfg.cells(); ++c) texts_.push_back(toolcall::format_crop_command(cell_box(cfg, c)));
}

bool Vocabulary::is_symbol(std::int32_t id) const { return id >= kFixedCount && id < kFixedCount + symbols_; }
bool Vocabulary::is_cell(std::int32_t id) const {
  return id >= kFixedCount + symbols_ && static_cast<std::size_t>(id) < texts_.size();
}

std::vector<std::int32_t> Vocabulary::encode(std::string_view text) const {
  std::vector<std::int32_t> ids;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::int32_t best = -1;
    std::size_t best_len = 0;
    for (std::size_t id = 0; id < texts_.size(); ++id) {
      const auto& t = texts_[id];
      if (t.size() > best_len && text.compare(pos, t.size(), t) == 0) {
        best = static_cast<std::int32_t>(id);
        best_len = t.size();
      }
    }
    if (best < 0)
      throw Error(ErrorCode::AlignmentError, "text outside the toy vocabulary at offset " + std::to_string(pos));
    ids.push_back(best);
    pos += best_len;
  }
  return ids;
}

std::string Vocabulary::decode(std::span<const std::int32_t> ids) const {
  std::string out;
  for (auto id : ids) out += text(id);
  return out;
}

// ------------------------------------------------------------------- policy

ToyPolicy::ToyPolicy(TaskConfig task, PolicyConfig policy)
    : task_(task), policy_(policy), vocab_(task) {
  task_.validate();
  if (policy_.image_levels < 2) throw Error(ErrorCode::ConfigError, "image_levels must be >= 2");
  layout_.feature_dim = static_cast<std::size_t>(task_.cells() + kFinePositions + 2);
  const std::size_t d = layout_.feature_dim;
  layout_.look_offset = 0;
  layout_.cell_offset = layout_.look_offset + 2 * d;
  layout_.answer_offset = layout_.cell_offset + static_cast<std::size_t>(task_.cells()) * d;
  layout_.image_offset = layout_.answer_offset + static_cast<std::size_t>(task_.symbols) * d;
  layout_.total = layout_.image_offset +
                  static_cast<std::size_t>(policy_.image_levels) * (kFinePositions + 1);

  params_.assign(layout_.total, 0.0);
  std::mt19937_64 rng(policy_.init_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& p : params_) p = policy_.init_scale * normal(rng);
  reference_ = params_;
}

std::vector<double> ToyPolicy::parameters() const {
  std::lock_guard lock(mutex_);
  return params_;
}

void ToyPolicy::set_parameters(std::span<const double> values) {
  if (values.size() != layout_.total) throw Error(ErrorCode::InvalidArgument, "parameter count mismatch");
  std::lock_guard lock(mutex_);
  params_.assign(values.begin(), values.end());
}

std::uint64_t ToyPolicy::version() const {
  std::lock_guard lock(mutex_);
  return version_;
}

void ToyPolicy::set_learning_rate(double lr) {
  std::lock_guard lock(mutex_);
  policy_.learning_rate = lr;
}

void ToyPolicy::snapshot_reference() {
  std::lock_guard lock(mutex_);
  reference_ = params_;
}

std::uint64_t ToyPolicy::apply_update(std::span<const double> grad) {
  if (grad.size() != layout_.total) throw Error(ErrorCode::InvalidArgument, "gradient size mismatch");
  if (!std::all_of(grad.begin(), grad.end(), [](double g) { return std::isfinite(g); }))
    throw Error(ErrorCode::NonFiniteGradient, "gradient has non-finite entries");
  std::lock_guard lock(mutex_);
  if (policy_.learning_rate != 0.0)
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i] -= policy_.learning_rate * grad[i];
  return ++version_;
}

nlohmann::json ToyPolicy::checkpoint() const {
  std::lock_guard lock(mutex_);
  return {{"kind", "toy"},
          {"G", task_.grid},
          {"K", task_.symbols},
          {"cell", task_.cell},
          {"max_looks", policy_.max_looks},
          {"image_levels", policy_.image_levels},
          {"version", version_},
          {"params", params_},
          {"reference", reference_}};
}

void ToyPolicy::load_checkpoint(const nlohmann::json& j) {
  try {
    if (j.at("G").get<int>() != task_.grid || j.at("K").get<int>() != task_.symbols ||
        j.at("cell").get<int>() != task_.cell)
      throw Error(ErrorCode::SchemaViolation, "checkpoint task shape differs from this policy");
    auto params = j.at("params").get<std::vector<double>>();
    auto reference = j.value("reference", params);
    if (params.size() != layout_.total || reference.size() != layout_.total)
      throw Error(ErrorCode::SchemaViolation, "checkpoint parameter count mismatch");
    std::lock_guard lock(mutex_);
    params_ = std::move(params);
    reference_ = std::move(reference);
    version_ = j.value("version", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::SchemaViolation, std::string("checkpoint: ") + e.what());
  }
}

int ToyPolicy::head_options(Head head) const {
  switch (head) {
    case Head::Look: return 2;
    case Head::Cell: return task_.cells();
    case Head::Answer: return task_.symbols;
    case Head::Forced: return 1;
  }
  return 1;
}

std::size_t ToyPolicy::head_offset(Head head) const {
  switch (head) {
    case Head::Look: return layout_.look_offset;
    case Head::Cell: return layout_.cell_offset;
    case Head::Answer: return layout_.answer_offset;
    case Head::Forced: break;
  }
  throw Error(ErrorCode::InvalidArgument, "forced steps have no head");
}

std::vector<double> ToyPolicy::head_logits(std::span<const double> params, Head head,
                                           std::span<const double> features) const {
  const int n = head_options(head);
  const std::size_t off = head_offset(head);
  const std::size_t d = layout_.feature_dim;
  std::vector<double> logits(static_cast<std::size_t>(n), 0.0);
  for (int k = 0; k < n; ++k) {
    const double* w = params.data() + off + static_cast<std::size_t>(k) * d;
    logits[static_cast<std::size_t>(k)] = std::inner_product(features.begin(), features.end(), w, 0.0);
  }
  return logits;
}

std::vector<double> ToyPolicy::build_features(std::span<const double> coarse, const double* fine, int) const {
  std::vector<double> f;
  f.reserve(layout_.feature_dim);
  f.insert(f.end(), coarse.begin(), coarse.end());
  for (int i = 0; i < kFinePositions; ++i) f.push_back(fine ? fine[i] : 0.0);
  f.push_back(fine ? 1.0 : 0.0);
  f.push_back(1.0);
  return f;
}

std::array<int, kFinePositions> ToyPolicy::quantize(const std::array<double, kFinePositions>& fine) const {
  std::array<int, kFinePositions> levels{};
  const int q = policy_.image_levels;
  for (int i = 0; i < kFinePositions; ++i) {
    // Uniform bins over [-2, 2].
    const double u = (std::clamp(fine[static_cast<std::size_t>(i)], -2.0, 2.0) + 2.0) / 4.0;
    levels[static_cast<std::size_t>(i)] = std::min(q - 1, static_cast<int>(u * q));
  }
  return levels;
}

double ToyPolicy::image_logprob(std::span<const double> params, int position, int level, double shift) const {
  const int q = policy_.image_levels;
  std::vector<double> logits(static_cast<std::size_t>(q));
  for (int k = 0; k < q; ++k) {
    const double* row = params.data() + layout_.image_offset + static_cast<std::size_t>(k) * (kFinePositions + 1);
    logits[static_cast<std::size_t>(k)] = row[position] + row[kFinePositions] + (k == level ? shift : 0.0);
  }
  return log_softmax_at(logits, static_cast<std::size_t>(level));
}

// Grammar of the toy policy:
//   <think> (Look cell)* Done </think> <answer> symbol </answer>
// Look/cell/symbol choices are sampled; every other token is forced.
enum class Phase { Start, Decide, Cell, ThinkClose, AnswerOpen, Answer, AnswerClose, End };

class ToyPolicy::ToySession final : public Session {
 public:
  ToySession(const ToyPolicy& policy, const EpisodeInput& input, const SamplingConfig& sampling)
      : policy_(policy), sampling_(sampling), rng_(sampling.seed) {
    params_ = policy.parameters();
    coarse_ = coarse_features(policy.task_, *input.image.image);
    if (sampling.forced_text) forced_ = policy.vocab_.encode(*sampling.forced_text);
  }

  Generation generate_until(const StopPredicate& stop, std::size_t max_tokens) override {
    Generation g;
    while (phase_ != Phase::End) {
      if (g.token_ids.size() >= max_tokens) {
        g.reason = StopReason::TokenBudget;
        return g;
      }
      if (sampling_.forced_text && cursor_ >= forced_.size()) break;
      const auto [token, logprob] = next_token();
      g.token_ids.push_back(token);
      g.logprobs.push_back(logprob);
      g.text += policy_.vocab_.text(token);
      if (stop && stop(g.text)) {
        g.reason = StopReason::Predicate;
        return g;
      }
    }
    g.reason = StopReason::EndOfSequence;
    return g;
  }

  int inject_image(const RegionEvidence& evidence) override {
    fine_ = fine_features(*evidence.pixels);
    has_fine_ = true;
    return kFinePositions;
  }

 private:
  std::pair<std::int32_t, double> next_token() {
    const auto& vocab = policy_.vocab_;
    const std::optional<std::int32_t> forced =
        sampling_.forced_text ? std::optional(forced_[cursor_++]) : std::nullopt;
    const auto expect = [&](std::int32_t id) {
      if (forced && *forced != id)
        throw Error(ErrorCode::AlignmentError, "forced token '" + vocab.text(*forced) +
                                                   "' where the grammar requires '" + vocab.text(id) + "'");
      return std::pair<std::int32_t, double>{id, 0.0};
    };

    switch (phase_) {
      case Phase::Start:
        phase_ = Phase::Decide;
        return expect(Vocabulary::ThinkOpen);
      case Phase::Decide: {
        if (looks_ >= policy_.policy_.max_looks) {
          phase_ = Phase::ThinkClose;
          return expect(Vocabulary::Done);
        }
        const auto [choice, lp] = choose(Head::Look, forced, [&](std::int32_t id) {
          return id == Vocabulary::Look ? 0 : id == Vocabulary::Done ? 1 : -1;
        });
        if (choice == 0) {
          ++looks_;
          phase_ = Phase::Cell;
          return {Vocabulary::Look, lp};
        }
        phase_ = Phase::ThinkClose;
        return {Vocabulary::Done, lp};
      }
      case Phase::Cell: {
        const auto [choice, lp] =
            choose(Head::Cell, forced, [&](std::int32_t id) { return vocab.is_cell(id) ? vocab.cell_of(id) : -1; });
        phase_ = Phase::Decide;
        return {vocab.cell_token(choice), lp};
      }
      case Phase::ThinkClose:
        phase_ = Phase::AnswerOpen;
        return expect(Vocabulary::ThinkClose);
      case Phase::AnswerOpen:
        phase_ = Phase::Answer;
        return expect(Vocabulary::AnswerOpen);
      case Phase::Answer: {
        const auto [choice, lp] = choose(Head::Answer, forced, [&](std::int32_t id) {
          return vocab.is_symbol(id) ? vocab.symbol_of(id) : -1;
        });
        phase_ = Phase::AnswerClose;
        return {vocab.symbol_token(choice), lp};
      }
      case Phase::AnswerClose:
        phase_ = Phase::End;
        return expect(Vocabulary::AnswerClose);
      case Phase::End:
        break;
    }
    throw Error(ErrorCode::BackendFailure, "generation past end of sequence");
  }

  template <class ToChoice>
  std::pair<int, double> choose(Head head, std::optional<std::int32_t> forced, ToChoice to_choice) {
    const auto features = policy_.build_features(coarse_, has_fine_ ? fine_.data() : nullptr, looks_);
    const auto logits = policy_.head_logits(params_, head, features);
    int choice = 0;
    if (forced) {
      choice = to_choice(*forced);
      if (choice < 0)
        throw Error(ErrorCode::AlignmentError, "forced token '" + policy_.vocab_.text(*forced) +
                                                   "' is not allowed here");
    } else if (sampling_.greedy || sampling_.temperature <= 0.0) {
      choice = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    } else {
      std::vector<double> p = logits;
      for (double& l : p) l /= sampling_.temperature;
      softmax_inplace(p);
      const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
      double acc = 0.0;
      choice = static_cast<int>(p.size()) - 1;
      for (std::size_t k = 0; k < p.size(); ++k) {
        acc += p[k];
        if (u < acc) {
          choice = static_cast<int>(k);
          break;
        }
      }
    }
    return {choice, log_softmax_at(logits, static_cast<std::size_t>(choice))};
  }

  const ToyPolicy& policy_;
  SamplingConfig sampling_;
  std::mt19937_64 rng_;
  std::vector<double> params_;
  std::vector<double> coarse_;
  std::array<double, kFinePositions> fine_{};
  bool has_fine_ = false;
  int looks_ = 0;
  Phase phase_ = Phase::Start;
  std::vector<std::int32_t> forced_;
  std::size_t cursor_ = 0;
};

std::unique_ptr<Session> ToyPolicy::start(const EpisodeInput& input, const SamplingConfig& sampling) {
  return std::make_unique<ToySession>(*this, input, sampling);
}

ToyPolicy::Replay ToyPolicy::replay(const EpisodeInput& input, const Trajectory& trajectory) const {
  check_segment_partition(trajectory);
  Replay r;
  r.steps.resize(trajectory.token_ids.size());
  const auto coarse = coarse_features(task_, *input.image.image);
  std::array<double, kFinePositions> fine{};
  bool has_fine = false;
  int looks = 0;
  Phase phase = Phase::Start;

  const auto forced = [&](std::size_t t, std::int32_t id, Phase next) {
    if (trajectory.token_ids[t] != id)
      throw Error(ErrorCode::AlignmentError, "token " + std::to_string(t) + " does not follow the toy grammar");
    r.steps[t] = Step{Head::Forced, id, {}, 0};
    phase = next;
  };
  const auto chosen = [&](std::size_t t, Head head, int choice, Phase next) {
    r.steps[t] = Step{head, trajectory.token_ids[t], build_features(coarse, has_fine ? fine.data() : nullptr, looks),
                      choice};
    phase = next;
  };

  for (const auto& seg : trajectory.segments) {
    if (seg.kind == SegmentKind::InjectedImage) {
      if (!seg.region || !seg.region->pixels)
        throw Error(ErrorCode::AlignmentError, "injected segment without region pixels");
      if (seg.token_span.size() != static_cast<std::size_t>(kFinePositions))
        throw Error(ErrorCode::AlignmentError, "injected segment length differs from the toy feature block");
      fine = fine_features(*seg.region->pixels);
      has_fine = true;
      r.injected_levels.push_back(quantize(fine));
      continue;
    }
    for (std::size_t t = seg.token_span.begin; t < seg.token_span.end; ++t) {
      const std::int32_t id = trajectory.token_ids[t];
      switch (phase) {
        case Phase::Start: forced(t, Vocabulary::ThinkOpen, Phase::Decide); break;
        case Phase::Decide:
          if (looks >= policy_.max_looks) {
            forced(t, Vocabulary::Done, Phase::ThinkClose);
          } else if (id == Vocabulary::Look) {
            chosen(t, Head::Look, 0, Phase::Cell);
            ++looks;
          } else if (id == Vocabulary::Done) {
            chosen(t, Head::Look, 1, Phase::ThinkClose);
          } else {
            throw Error(ErrorCode::AlignmentError, "expected a look/done decision at token " + std::to_string(t));
          }
          break;
        case Phase::Cell:
          if (!vocab_.is_cell(id)) throw Error(ErrorCode::AlignmentError, "expected a crop command token");
          chosen(t, Head::Cell, vocab_.cell_of(id), Phase::Decide);
          break;
        case Phase::ThinkClose: forced(t, Vocabulary::ThinkClose, Phase::AnswerOpen); break;
        case Phase::AnswerOpen: forced(t, Vocabulary::AnswerOpen, Phase::Answer); break;
        case Phase::Answer:
          if (!vocab_.is_symbol(id)) throw Error(ErrorCode::AlignmentError, "expected an answer symbol");
          chosen(t, Head::Answer, vocab_.symbol_of(id), Phase::AnswerClose);
          break;
        case Phase::AnswerClose: forced(t, Vocabulary::AnswerClose, Phase::End); break;
        case Phase::End: throw Error(ErrorCode::AlignmentError, "tokens after end of sequence");
      }
    }
  }
  return r;
}

SequenceLogprobs ToyPolicy::score_sequence(const EpisodeInput& input, const Trajectory& trajectory,
                                           const ScoreOptions& options) const {
  const Replay r = replay(input, trajectory);
  std::vector<double> params, reference;
  {
    std::lock_guard lock(mutex_);
    params = params_;
    reference = reference_;
  }
  SequenceLogprobs out;
  out.current.assign(trajectory.token_ids.size(), 0.0);
  out.reference.assign(trajectory.token_ids.size(), 0.0);
  std::size_t injected = 0;
  for (const auto& seg : trajectory.segments) {
    if (seg.kind == SegmentKind::InjectedImage) {
      const auto& levels = r.injected_levels[injected++];
      for (std::size_t t = seg.token_span.begin, p = 0; t < seg.token_span.end; ++t, ++p) {
        const int pos = static_cast<int>(p);
        out.current[t] = image_logprob(params, pos, levels[p], options.injected_logit_shift);
        out.reference[t] = image_logprob(reference, pos, levels[p], options.injected_logit_shift);
      }
      continue;
    }
    for (std::size_t t = seg.token_span.begin; t < seg.token_span.end; ++t) {
      const Step& s = r.steps[t];
      if (s.head == Head::Forced) continue;
      out.current[t] = log_softmax_at(head_logits(params, s.head, s.features), static_cast<std::size_t>(s.choice));
      out.reference[t] =
          log_softmax_at(head_logits(reference, s.head, s.features), static_cast<std::size_t>(s.choice));
    }
  }
  return out;
}

void ToyPolicy::accumulate_gradient(const EpisodeInput& input, const Trajectory& trajectory,
                                    std::span<const double> token_weights, std::span<double> grad) const {
  if (token_weights.size() != trajectory.token_ids.size())
    throw Error(ErrorCode::SpanMismatch, "token weights differ in length from the trajectory");
  if (grad.size() != layout_.total) throw Error(ErrorCode::InvalidArgument, "gradient size mismatch");
  const Replay r = replay(input, trajectory);
  const std::vector<double> params = parameters();
  const std::size_t d = layout_.feature_dim;

  std::size_t injected = 0;
  for (const auto& seg : trajectory.segments) {
    if (seg.kind == SegmentKind::InjectedImage) {
      const auto& levels = r.injected_levels[injected++];
      for (std::size_t t = seg.token_span.begin, p = 0; t < seg.token_span.end; ++t, ++p) {
        const double w = token_weights[t];
        if (w == 0.0) continue;
        const int q = policy_.image_levels;
        std::vector<double> probs(static_cast<std::size_t>(q));
        for (int k = 0; k < q; ++k) {
          const double* row = params.data() + layout_.image_offset + static_cast<std::size_t>(k) * (kFinePositions + 1);
          probs[static_cast<std::size_t>(k)] = row[p] + row[kFinePositions];
        }
        softmax_inplace(probs);
        for (int k = 0; k < q; ++k) {
          const double g = w * ((k == levels[p] ? 1.0 : 0.0) - probs[static_cast<std::size_t>(k)]);
          double* row = grad.data() + layout_.image_offset + static_cast<std::size_t>(k) * (kFinePositions + 1);
          row[p] += g;
          row[kFinePositions] += g;
        }
      }
      continue;
    }
    for (std::size_t t = seg.token_span.begin; t < seg.token_span.end; ++t) {
      const Step& s = r.steps[t];
      const double w = token_weights[t];
      if (s.head == Head::Forced || w == 0.0) continue;
      auto probs = head_logits(params, s.head, s.features);
      softmax_inplace(probs);
      const std::size_t off = head_offset(s.head);
      for (std::size_t k = 0; k < probs.size(); ++k) {
        const double g = w * ((static_cast<int>(k) == s.choice ? 1.0 : 0.0) - probs[k]);
        double* row = grad.data() + off + k * d;
        for (std::size_t i = 0; i < d; ++i) row[i] += g * s.features[i];
      }
    }
  }
}

// ------------------------------------------------------------------- oracle

namespace {

class OracleSession final : public Session {
 public:
  OracleSession(const TaskConfig& task, const EpisodeInput& input) : task_(task) {
    const int cell = brightest_cell(task, *input.image.image);
    pending_ = std::string(toolcall::kThinkOpen) + std::string(kLookText) +
               toolcall::format_crop_command(cell_box(task, cell));
  }

  Generation generate_until(const StopPredicate& stop, std::size_t max_tokens) override {
    Generation g;
    while (true) {
      if (pos_ >= pending_.size()) {
        if (answered_) break;
        // Second turn: answer with whatever the crop showed; guess without one.
        const int symbol = evidence_ ? decode_symbol(task_, *evidence_) : 0;
        pending_ += std::string(kDoneText) + std::string(toolcall::kThinkClose) +
                    std::string(toolcall::kAnswerOpen) + symbol_name(symbol) +
                    std::string(toolcall::kAnswerClose);
        answered_ = true;
      }
      if (g.token_ids.size() >= max_tokens) {
        g.reason = StopReason::TokenBudget;
        return g;
      }
      const char c = pending_[pos_++];
      g.text.push_back(c);
      g.token_ids.push_back(static_cast<unsigned char>(c));
      g.logprobs.push_back(0.0);
      if (stop && stop(g.text)) {
        g.reason = StopReason::Predicate;
        return g;
      }
    }
    g.reason = StopReason::EndOfSequence;
    return g;
  }

  int inject_image(const RegionEvidence& evidence) override {
    evidence_ = evidence.pixels;
    return kFinePositions;
  }

 private:
  TaskConfig task_;
  std::string pending_;
  std::size_t pos_ = 0;
  bool answered_ = false;
  std::shared_ptr<const Image> evidence_;
};

}  // namespace

std::unique_ptr<Session> CropOracle::start(const EpisodeInput& input, const SamplingConfig&) {
  return std::make_unique<OracleSession>(task_, input);
}

}  // namespace vlmr3::toy
