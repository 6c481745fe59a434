#pragma once

// Synthetic crop-to-reveal task and the small trainable policy that plays it.
//
// The image is a G x G grid of cells. Each cell shows one of K symbols drawn
// as a 4 x 4 block pattern; every pattern lights exactly half of its blocks,
// so all cells have the same mean intensity and a cell-level average pool
// cannot tell symbols apart. One cell is highlighted by a brightness offset.
// Reading the symbol requires a crop at native resolution.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "vlmr3/backend.hpp"

namespace vlmr3::toy {

inline constexpr int kMaxSymbols = 8;
inline constexpr int kPatternSide = 4;
inline constexpr int kFinePositions = kPatternSide * kPatternSide;

struct TaskConfig {
  int grid = 3;
  int cell = 20;
  int symbols = 8;
  std::uint8_t on_level = 200;
  std::uint8_t off_level = 40;
  std::uint8_t highlight_offset = 30;

  void validate() const;
  int cells() const { return grid * grid; }
  ImageDims image_dims() const { return {grid * cell, grid * cell}; }
};

std::string symbol_name(int symbol);
// Bit (row * 4 + col) set = block lit.
std::uint16_t symbol_pattern(int symbol);

inline constexpr std::string_view kQuestion = "What symbol is in the highlighted cell?";

struct Sample {
  std::string id;
  Image image;
  int highlighted = 0;
  std::vector<int> symbols;  // per cell, row-major
  std::string answer;
};

Sample render_sample(const TaskConfig& cfg, std::string id, int highlighted,
                     std::vector<int> symbols);
BBox cell_box(const TaskConfig& cfg, int cell);

// Balanced split: cycles through every (highlighted cell, symbol) pair so a
// policy that only sees the highlight position scores exactly 1/K.
std::vector<Sample> make_split(const TaskConfig& cfg, std::uint64_t seed, std::size_t count,
                               const std::string& prefix);

struct FixtureDescriptor {
  TaskConfig task;
  std::uint64_t seed = 0;
  std::size_t train_size = 0;
  std::size_t eval_size = 0;
};

nlohmann::json to_json(const FixtureDescriptor& d);
FixtureDescriptor fixture_from_json(const nlohmann::json& j);

// Per-image layer-normalised average pools.
std::vector<double> coarse_features(const TaskConfig& cfg, const Image& image);
std::array<double, kFinePositions> fine_features(const Image& evidence);
// Nearest symbol to the fine features; the oracle's "reading" of a crop.
int decode_symbol(const TaskConfig& cfg, const Image& evidence);
int brightest_cell(const TaskConfig& cfg, const Image& image);

// Gold rationale: crop the highlighted cell once, then answer.
std::string oracle_transcript(const TaskConfig& cfg, const Sample& sample);

struct PolicyConfig {
  int max_looks = 8;
  int image_levels = 4;
  double learning_rate = 0.5;
  double init_scale = 0.01;
  std::uint64_t init_seed = 0;
};

// Token vocabulary shared by the toy tokenizer and policy.
class Vocabulary {
 public:
  explicit Vocabulary(const TaskConfig& cfg);

  enum Fixed : std::int32_t { ThinkOpen = 0, Look, Done, ThinkClose, AnswerOpen, AnswerClose };
  std::int32_t symbol_token(int symbol) const { return kFixedCount + symbol; }
  std::int32_t cell_token(int cell) const { return kFixedCount + symbols_ + cell; }
  bool is_symbol(std::int32_t id) const;
  bool is_cell(std::int32_t id) const;
  int symbol_of(std::int32_t id) const { return id - kFixedCount; }
  int cell_of(std::int32_t id) const { return id - kFixedCount - symbols_; }

  std::size_t size() const { return texts_.size(); }
  const std::string& text(std::int32_t id) const { return texts_.at(static_cast<std::size_t>(id)); }

  // Greedy longest match; throws AlignmentError on text outside the vocabulary.
  std::vector<std::int32_t> encode(std::string_view text) const;
  std::string decode(std::span<const std::int32_t> ids) const;

 private:
  static constexpr std::int32_t kFixedCount = 6;
  int symbols_;
  std::vector<std::string> texts_;
};

// Linear-softmax sequence policy over the toy vocabulary. Each generation
// step reads a feature vector built from the global view, the most recent
// injected crop and the step's grammar state; injected crops occupy
// kFinePositions context positions scored by a separate image head.
class ToyPolicy final : public TrainableBackend {
 public:
  ToyPolicy(TaskConfig task, PolicyConfig policy);

  std::string name() const override { return "toy"; }
  Capabilities capabilities() const override { return {true, true, true}; }
  std::unique_ptr<Session> start(const EpisodeInput& input, const SamplingConfig& sampling) override;

  std::size_t parameter_count() const override { return params_.size(); }
  std::vector<double> parameters() const override;
  void set_parameters(std::span<const double> values) override;
  std::uint64_t version() const override;

  SequenceLogprobs score_sequence(const EpisodeInput& input, const Trajectory& trajectory,
                                  const ScoreOptions& options = {}) const override;
  void accumulate_gradient(const EpisodeInput& input, const Trajectory& trajectory,
                           std::span<const double> token_weights,
                           std::span<double> grad) const override;
  std::uint64_t apply_update(std::span<const double> grad) override;
  void snapshot_reference() override;

  const TaskConfig& task() const { return task_; }
  const PolicyConfig& config() const { return policy_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  void set_learning_rate(double lr);

  nlohmann::json checkpoint() const;
  void load_checkpoint(const nlohmann::json& j);

  // Parameter block layout, exposed for tests.
  struct Layout {
    std::size_t feature_dim = 0;
    std::size_t look_offset = 0;
    std::size_t cell_offset = 0;
    std::size_t answer_offset = 0;
    std::size_t image_offset = 0;
    std::size_t total = 0;
  };
  const Layout& layout() const { return layout_; }

  class ToySession;

 private:
  friend class ToySession;

  enum class Head { Forced, Look, Cell, Answer };

  struct Step {
    Head head = Head::Forced;
    std::int32_t token = 0;
    std::vector<double> features;  // empty for forced steps
    int choice = 0;                // index within the head's options
  };

  struct Replay {
    std::vector<Step> steps;                     // one per model token
    std::vector<std::array<int, kFinePositions>> injected_levels;
  };

  int head_options(Head head) const;
  std::size_t head_offset(Head head) const;
  std::vector<double> head_logits(std::span<const double> params, Head head,
                                  std::span<const double> features) const;
  std::vector<double> build_features(std::span<const double> coarse, const double* fine,
                                     int looks) const;
  std::array<int, kFinePositions> quantize(const std::array<double, kFinePositions>& fine) const;
  double image_logprob(std::span<const double> params, int position, int level,
                       double shift) const;

  Replay replay(const EpisodeInput& input, const Trajectory& trajectory) const;

  TaskConfig task_;
  PolicyConfig policy_;
  Vocabulary vocab_;
  Layout layout_;
  mutable std::mutex mutex_;
  std::vector<double> params_;
  std::vector<double> reference_;
  std::uint64_t version_ = 0;
};

// Scripted policy that crops the brightest cell and answers whatever the
// injected crop shows. Answers depend on crop content, so grounding noise
// shows up directly in accuracy.
class CropOracle final : public PolicyBackend {
 public:
  explicit CropOracle(TaskConfig task) : task_(task) {}

  std::string name() const override { return "crop-oracle"; }
  Capabilities capabilities() const override { return {false, true, true}; }
  std::unique_ptr<Session> start(const EpisodeInput& input, const SamplingConfig& sampling) override;

  const TaskConfig& task() const { return task_; }

 private:
  TaskConfig task_;
};

EpisodeInput make_input(const Sample& sample, std::string system_prompt);

}  // namespace vlmr3::toy
