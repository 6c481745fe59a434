// vlmr3: stage-by-stage driver (build-data, filter-data, train, eval, perturb, stats).

#include <algorithm>
#include <fstream>
#include <future>
#include <iostream>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"

#include "vlmr3/config.hpp"
#include "vlmr3/prompts.hpp"
#include "vlmr3/remote.hpp"
#include "vlmr3/rollout.hpp"
#include "vlmr3/toy.hpp"
#include "vlmr3/vision.hpp"
#include "vlmr3/vlir.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vlmr3;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitStageFailure = 1;
constexpr int kExitConfigError = 2;

struct Overrides {
  std::string config_path;
  std::string output_dir;
  std::optional<std::uint64_t> seed;
  std::string backend;
  std::string checkpoint;
};

class Run {
 public:
  explicit Run(config::RunConfig cfg) : cfg_(std::move(cfg)), hash_(cfg_.hash()) {
    fs::create_directories(cfg_.output_dir);
  }

  const config::RunConfig& cfg() const { return cfg_; }
  fs::path path(const std::string& name) const { return fs::path(cfg_.output_dir) / name; }

  json stamp(json j) const {
    j["config_hash"] = hash_;
    j["seed"] = cfg_.seed;
    return j;
  }

  void write(const std::string& name, const json& j) const {
    std::ofstream out(path(name));
    out << stamp(j).dump(2) << '\n';
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path(name).string());
  }

  void write_config() const {
    std::ofstream out(path("config.json"));
    out << json{{"config", config::to_json(cfg_)}, {"config_hash", hash_}}.dump(2) << '\n';
  }

 private:
  config::RunConfig cfg_;
  std::string hash_;
};

config::RunConfig load_config(const Overrides& o) {
  auto cfg = o.config_path.empty() ? config::RunConfig{} : config::load(o.config_path);
  if (!o.output_dir.empty()) cfg.output_dir = o.output_dir;
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.policy.rng_seed = *o.seed;
    cfg.toy.policy.init_seed = *o.seed;
  }
  if (!o.backend.empty()) cfg.backend.kind = o.backend;
  if (!o.checkpoint.empty()) cfg.backend.checkpoint = o.checkpoint;
  return cfg;
}

rollout::EpisodeConfig episode_config(const config::RunConfig& cfg) {
  rollout::EpisodeConfig ec;
  ec.injection_mode = cfg.policy.injection_mode;
  ec.max_crop_turns = cfg.policy.max_crop_turns;
  ec.max_total_tokens = cfg.train.max_total_tokens;
  ec.iou_threshold = cfg.policy.iou_redundancy_threshold;
  return ec;
}

std::shared_ptr<const EpisodeInput> toy_input(const toy::Sample& s) {
  return std::make_shared<EpisodeInput>(toy::make_input(s, std::string(prompts::kSystemInstruction)));
}

std::vector<rollout::EvalItem> toy_eval_set(const config::RunConfig& cfg) {
  std::vector<rollout::EvalItem> items;
  for (const auto& s : toy::make_split(cfg.toy.task, cfg.seed + 2000, cfg.toy.eval_size, "eval"))
    items.push_back({toy_input(s), s.answer});
  return items;
}

// {id, image, question, answer} records; image paths are relative to the file.
std::vector<rollout::EvalItem> file_eval_set(const config::RunConfig& cfg, const fs::path& file) {
  std::vector<rollout::EvalItem> items;
  for (const auto& r : vlir::read_records(file)) {
    auto in = std::make_shared<EpisodeInput>();
    in->question_id = r.at("id").get<std::string>();
    const Image img = read_pnm(file.parent_path() / r.at("image").get<std::string>());
    in->image = vision::normalize_pixels(img, cfg.policy.min_pixels, cfg.policy.max_pixels);
    in->question = r.at("question").get<std::string>();
    in->system_prompt = std::string(prompts::kSystemInstruction);
    items.push_back({std::move(in), r.at("answer").get<std::string>()});
  }
  return items;
}

std::unique_ptr<toy::ToyPolicy> make_toy(const config::RunConfig& cfg) {
  auto policy = std::make_unique<toy::ToyPolicy>(cfg.toy.task, cfg.toy.policy);
  if (!cfg.backend.checkpoint.empty()) {
    std::ifstream in(cfg.backend.checkpoint);
    if (!in) throw Error(ErrorCode::ConfigError, "checkpoint not found: " + cfg.backend.checkpoint);
    policy->load_checkpoint(json::parse(in));
  }
  return policy;
}

std::unique_ptr<PolicyBackend> make_backend(const config::RunConfig& cfg) {
  if (cfg.backend.kind == "toy") return make_toy(cfg);
  if (cfg.backend.kind == "oracle") return std::make_unique<toy::CropOracle>(cfg.toy.task);
  if (cfg.backend.endpoint.url.empty()) throw Error(ErrorCode::ConfigError, "backend.endpoint.url is required for remote");
  return std::make_unique<RemoteBackend>(cfg.backend.endpoint);
}

std::vector<rollout::EvalItem> eval_set(const config::RunConfig& cfg, const std::string& dataset) {
  if (!dataset.empty() && !fs::exists(dataset)) throw Error(ErrorCode::ConfigError, "dataset not found: " + dataset);
  auto items = dataset.empty() ? toy_eval_set(cfg) : file_eval_set(cfg, dataset);
  if (items.empty())
    throw Error(ErrorCode::ConfigError,
                "evaluation dataset is empty; pass --dataset <records.jsonl> or set toy.eval_size > 0");
  return items;
}

std::string ablation_label(const config::RunConfig& cfg) {
  std::vector<std::string> parts;
  if (cfg.policy.injection_mode == InjectionMode::TextOnly) parts.push_back("w/o interleaved CoT");
  if (cfg.train.skip_sft) parts.push_back("w/o VLIR SFT");
  if (cfg.train.skip_rgrpo) parts.push_back("w/o R-GRPO");
  if (parts.empty()) return "full";
  std::string out = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) out += "; " + parts[i];
  return out;
}

// ------------------------------------------------------------------ stages

int cmd_train(const Run& run) {
  const auto& cfg = run.cfg();
  const std::string label = ablation_label(cfg);
  if (cfg.backend.kind != "toy") throw Error(ErrorCode::ConfigError, "train needs the trainable toy backend");
  if (cfg.train.skip_sft && cfg.train.skip_rgrpo) {
    std::cout << "train: both SFT and R-GRPO are skipped; nothing to do\n";
    run.write("train_summary.json", {{"label", label}, {"noop", true}});
    return kExitOk;
  }

  auto policy = make_toy(cfg);
  const auto ec = episode_config(cfg);
  const auto evals = toy_eval_set(cfg);
  const auto train = toy::make_split(cfg.toy.task, cfg.seed + 1000, cfg.toy.train_size, "train");
  if (train.empty()) throw Error(ErrorCode::ConfigError, "toy.train_size must be positive");
  std::vector<std::shared_ptr<const EpisodeInput>> inputs;
  for (const auto& s : train) inputs.push_back(toy_input(s));

  std::ofstream metrics(run.path("metrics.jsonl"));
  json summary = {{"label", label}, {"injection_mode", to_string(cfg.policy.injection_mode)},
                  {"temperature", cfg.train.temperature}};
  const auto before = rollout::evaluate(*policy, evals, ec, cfg.seed);
  summary["eval_before"] = rollout::to_json(before);

  if (!cfg.train.skip_sft) {
    std::vector<rollout::SftItem> items;
    for (std::size_t i = 0; i < std::min(cfg.train.sft_items, train.size()); ++i)
      items.push_back({inputs[i], toy::oracle_transcript(cfg.toy.task, train[i])});
    policy->set_learning_rate(cfg.train.sft_learning_rate);
    auto sft_ec = ec;
    sft_ec.injection_mode = InjectionMode::Interleaved;
    const auto losses = rollout::run_sft(*policy, items, cfg.train.sft_epochs, sft_ec);
    for (std::size_t i = 0; i < losses.size(); ++i)
      metrics << run.stamp({{"stage", "sft"}, {"step", i}, {"loss", losses[i]}, {"label", label}}).dump() << '\n';
    policy->set_learning_rate(cfg.toy.policy.learning_rate);
    summary["eval_after_sft"] = rollout::to_json(rollout::evaluate(*policy, evals, ec, cfg.seed));
  }
  policy->snapshot_reference();

  if (!cfg.train.skip_rgrpo) {
    rollout::TrainConfig tc;
    tc.steps = cfg.train.steps;
    tc.groups_per_step = cfg.train.groups_per_step;
    tc.beta = cfg.policy.beta;
    tc.eval_every = cfg.train.eval_every;
    tc.group.group_size = cfg.policy.group_size;
    tc.group.episode = ec;
    tc.group.temperature = cfg.train.temperature;
    tc.group.seed = cfg.seed;
    const auto sampler = [&](std::uint64_t i) {
      return std::make_pair(inputs[i % inputs.size()], train[i % train.size()].answer);
    };
    const auto result = rollout::run_rgrpo(*policy, sampler, tc, evals, [&](const rgrpo::StepMetrics& m) {
      auto rec = m;
      rec.label = label;
      json j = rgrpo::to_json(rec);
      j["stage"] = "rgrpo";
      metrics << run.stamp(j).dump() << '\n';
    });
    json curve = json::array();
    for (const auto& [step, report] : result.evals) curve.push_back({{"step", step}, {"report", rollout::to_json(report)}});
    summary["eval_curve"] = curve;

    const auto window = std::min<std::size_t>(20, result.metrics.size());
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < window; ++i) {
      first += result.metrics[i].mean_reward / window;
      last += result.metrics[result.metrics.size() - 1 - i].mean_reward / window;
    }
    summary["trend"] = {{"window", window}, {"first_mean_reward", first}, {"last_mean_reward", last},
                        {"improved", last > first}};
  }
  const auto after = rollout::evaluate(*policy, evals, ec, cfg.seed);
  summary["eval_after"] = rollout::to_json(after);
  {
    std::ofstream ck(run.path("checkpoint.json"));
    ck << run.stamp(policy->checkpoint()).dump() << '\n';
  }
  run.write("train_summary.json", summary);
  std::cout << "train [" << label << "]: accuracy " << before.accuracy << " -> " << after.accuracy << '\n';
  return kExitOk;
}

int cmd_eval(const Run& run, const std::string& dataset) {
  const auto& cfg = run.cfg();
  auto backend = make_backend(cfg);
  const auto items = eval_set(cfg, dataset);
  const auto report = rollout::evaluate(*backend, items, episode_config(cfg), cfg.seed);
  json j = rollout::to_json(report);
  j["backend"] = backend->name();
  run.write("eval.json", j);
  std::cout << j.dump(2) << '\n';
  return report.failures == report.samples ? kExitStageFailure : kExitOk;
}

int cmd_perturb(const Run& run, const std::string& dataset) {
  const auto& cfg = run.cfg();
  auto backend = make_backend(cfg);
  const auto items = eval_set(cfg, dataset);
  const auto kind = rollout::parse_perturb_kind(cfg.perturb.kind);
  const auto points =
      rollout::perturbation_sweep(*backend, items, episode_config(cfg), cfg.perturb.grid, kind, cfg.perturb.jitter, cfg.seed);
  json rows = json::array();
  bool monotone = true;
  for (std::size_t i = 0; i < points.size(); ++i) {
    rows.push_back({{"grounding_accuracy", points[i].grounding_accuracy}, {"report", rollout::to_json(points[i].report)}});
    if (i > 0 && points[i].report.accuracy < points[i - 1].report.accuracy) monotone = false;
  }
  json j = {{"backend", backend->name()}, {"kind", cfg.perturb.kind}, {"jitter", cfg.perturb.jitter},
            {"points", rows}, {"non_decreasing", monotone}};
  run.write("perturb.json", j);
  for (const auto& p : points) std::cout << "p=" << p.grounding_accuracy << " accuracy=" << p.report.accuracy << '\n';
  return kExitOk;
}

int cmd_stats(const Run& run, bool fixture, const std::string& corpus_path) {
  const auto& cfg = run.cfg();
  std::vector<vlir::VlirSample> corpus;
  if (fixture) {
    corpus = vlir::distribution_fixture();
  } else {
    const std::string path = corpus_path.empty() ? cfg.data.corpus : corpus_path;
    if (path.empty()) throw Error(ErrorCode::ConfigError, "stats needs --fixture, --corpus or data.corpus");
    corpus = vlir::read_corpus(path);
  }
  json j = vlir::to_json(vlir::corpus_stats(corpus));
  run.write("stats.json", j);
  std::cout << j.dump(2) << '\n';
  return j.at("consistent").get<bool>() ? kExitOk : kExitStageFailure;
}

std::set<std::string> ids_in(const fs::path& path, const std::string& key) {
  std::set<std::string> ids;
  if (!fs::exists(path)) return ids;
  for (const auto& r : vlir::read_records(path))
    if (r.contains(key)) ids.insert(r.at(key).get<std::string>());
  return ids;
}

vlir::QaItem qa_item(const json& r, const fs::path& base, const fs::path& images_dir) {
  vlir::QaItem item;
  item.id = r.at("id").get<std::string>();
  const Image img = read_pnm(base / r.at("image").get<std::string>());
  item.image = std::make_shared<const Image>(img);
  item.image_ref = vlir::store_image(img, images_dir);
  item.source = vlir::parse_source(r.at("source").get<std::string>());
  item.question = r.at("question").get<std::string>();
  item.answer = r.at("answer").get<std::string>();
  if (r.contains("crop") && !r.at("crop").is_null()) item.crop = r.at("crop").get<std::string>();
  return item;
}

int cmd_build_data(const Run& run) {
  const auto& cfg = run.cfg();
  if (cfg.data.inputs.empty()) throw Error(ErrorCode::ConfigError, "data.inputs (QA manifest) is required");
  if (cfg.data.generator.url.empty()) throw Error(ErrorCode::ConfigError, "data.generator.url is required");
  const fs::path inputs = cfg.data.inputs;
  const fs::path corpus = cfg.data.corpus.empty() ? run.path("corpus.jsonl") : fs::path(cfg.data.corpus);
  const fs::path rejections = run.path("rejections.jsonl");
  const fs::path images = cfg.data.images_dir.empty() ? run.path("images") : fs::path(cfg.data.images_dir);

  std::set<std::string> done = ids_in(corpus, "sample_id");
  for (const auto& id : ids_in(rejections, "id")) done.insert(id);

  vlir::HttpChatClient generator(cfg.data.generator);
  vlir::BuildOptions options;
  options.max_attempts = cfg.data.max_attempts;

  std::vector<json> pending;
  for (auto& r : vlir::read_records(inputs))
    if (!done.contains(r.at("id").get<std::string>())) pending.push_back(std::move(r));

  std::size_t accepted = 0, attempts = 0;
  std::map<std::string, std::size_t> rejected;
  json failures = json::array();
  const std::size_t width = static_cast<std::size_t>(std::max(1, cfg.data.generator.max_in_flight));
  for (std::size_t begin = 0; begin < pending.size(); begin += width) {
    const std::size_t end = std::min(pending.size(), begin + width);
    std::vector<std::future<vlir::BuildOutcome>> futures;
    for (std::size_t i = begin; i < end; ++i)
      futures.push_back(std::async(std::launch::async, [&, i] {
        const auto item = qa_item(pending[i], inputs.parent_path(), images);
        return item.crop ? vlir::build_from_bbox(generator, item, options) : vlir::build_from_qa(generator, item, options);
      }));
    // Results are appended in manifest order so reruns give identical files.
    for (std::size_t i = begin; i < end; ++i) {
      const auto id = pending[i].at("id").get<std::string>();
      try {
        const auto outcome = futures[i - begin].get();
        attempts += static_cast<std::size_t>(outcome.attempts);
        if (outcome.sample) {
          vlir::append_record(corpus, vlir::to_json(*outcome.sample));
          ++accepted;
        } else {
          const auto reason = std::string(vlir::to_string(*outcome.rejection));
          ++rejected[reason];
          vlir::append_record(rejections, {{"id", id}, {"reason", reason}, {"attempts", outcome.attempts}});
        }
      } catch (const Error& e) {
        failures.push_back({{"id", id}, {"error", e.what()}});
      }
    }
  }
  json summary = {{"accepted", accepted}, {"rejected", rejected}, {"attempts", attempts},
                  {"skipped_existing", done.size()}, {"failures", failures}, {"corpus", corpus.string()},
                  {"generator", cfg.data.generator.model}};
  run.write("build_summary.json", summary);
  std::cout << summary.dump(2) << '\n';
  return failures.empty() ? kExitOk : kExitStageFailure;
}

int cmd_filter_data(const Run& run) {
  const auto& cfg = run.cfg();
  if (cfg.data.corpus.empty()) throw Error(ErrorCode::ConfigError, "data.corpus is required");
  if (cfg.data.region_filter.url.empty() || cfg.data.reasoning_filter.url.empty())
    throw Error(ErrorCode::ConfigError, "data.region_filter.url and data.reasoning_filter.url are required");
  const fs::path images = cfg.data.images_dir.empty() ? run.path("images") : fs::path(cfg.data.images_dir);
  const fs::path kept = run.path("filtered.jsonl");
  const fs::path dropped = run.path("filter_rejected.jsonl");
  const fs::path parked = run.path("parked.jsonl");

  std::set<std::string> done = ids_in(kept, "sample_id");
  for (const auto& id : ids_in(dropped, "sample_id")) done.insert(id);
  fs::remove(parked);

  vlir::HttpChatClient region(cfg.data.region_filter), reasoning(cfg.data.reasoning_filter);
  const vlir::RetryPolicy retry{cfg.data.filter_attempts, std::chrono::milliseconds(cfg.data.filter_backoff_ms)};
  std::map<std::string, std::size_t> counts;
  for (auto sample : vlir::read_corpus(cfg.data.corpus)) {
    if (done.contains(sample.sample_id)) continue;
    const Image image = read_pnm(images / sample.image_ref);
    vlir::Verdict v = vlir::Verdict::Accept;
    for (const auto& c : sample.crops) {
      v = vlir::filter_region_validity(region, std::make_shared<const Image>(vision::crop(image, c.bbox)), retry);
      if (v != vlir::Verdict::Accept) break;
    }
    sample.provenance.filters["region_validity"] = std::string(vlir::to_string(v));
    if (v == vlir::Verdict::Accept) {
      v = vlir::filter_reasoning_quality(reasoning, sample.question, sample.answer, sample.rationale, retry);
      sample.provenance.filters["reasoning_quality"] = std::string(vlir::to_string(v));
    }
    ++counts[std::string(vlir::to_string(v))];
    const auto& target = v == vlir::Verdict::Accept ? kept : v == vlir::Verdict::Reject ? dropped : parked;
    vlir::append_record(target, vlir::to_json(sample));
  }
  json summary = {{"verdicts", counts}, {"filtered", kept.string()}, {"parked", parked.string()}};
  run.write("filter_summary.json", summary);
  std::cout << summary.dump(2) << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crop-and-zoom reasoning pipeline driver"};
  app.require_subcommand(1);
  Overrides o;
  std::uint64_t seed = 0;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", o.config_path, "YAML run configuration");
    sub->add_option("-o,--output-dir", o.output_dir, "artifact directory");
    sub->add_option("--seed", seed, "run seed")->each([&](const std::string&) { o.seed = seed; });
  };

  auto* build = app.add_subcommand("build-data", "generate and rejection-sample interleaved rationales");
  auto* filter = app.add_subcommand("filter-data", "run the region and reasoning filters");
  auto* train = app.add_subcommand("train", "SFT warm start then R-GRPO on the toy task");
  auto* eval = app.add_subcommand("eval", "greedy exact-match evaluation");
  auto* perturb = app.add_subcommand("perturb", "grounding-accuracy perturbation sweep");
  auto* stats = app.add_subcommand("stats", "corpus distribution report");
  for (auto* sub : {build, filter, train, eval, perturb, stats}) add_common(sub);

  bool skip_sft = false, skip_rgrpo = false;
  std::string injection_mode;
  std::optional<int> steps;
  train->add_flag("--skip-sft", skip_sft, "skip the supervised warm start");
  train->add_flag("--skip-rgrpo", skip_rgrpo, "skip reinforcement learning");
  train->add_option("--injection-mode", injection_mode, "INTERLEAVED or TEXT_ONLY");
  train->add_option("--steps", steps, "R-GRPO steps");

  std::string dataset;
  for (auto* sub : {eval, perturb}) {
    sub->add_option("--backend", o.backend, "toy, oracle or remote");
    sub->add_option("--checkpoint", o.checkpoint, "toy checkpoint to load");
    sub->add_option("--dataset", dataset, "JSON-lines {id, image, question, answer}");
    sub->add_option("--injection-mode", injection_mode, "INTERLEAVED or TEXT_ONLY");
  }
  std::vector<double> grid;
  std::string kind;
  perturb->add_option("--p", grid, "grounding accuracies")->delimiter(',');
  perturb->add_option("--kind", kind, "replace_random or jitter");

  bool fixture = false;
  std::string corpus;
  stats->add_flag("--fixture", fixture, "use the built-in distribution fixture");
  stats->add_option("--corpus", corpus, "corpus JSON-lines file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfigError;
  }

  try {
    auto cfg = load_config(o);
    if (skip_sft) cfg.train.skip_sft = true;
    if (skip_rgrpo) cfg.train.skip_rgrpo = true;
    if (steps) cfg.train.steps = *steps;
    if (!injection_mode.empty()) cfg.policy.injection_mode = parse_injection_mode(injection_mode);
    if (!grid.empty()) cfg.perturb.grid = grid;
    if (!kind.empty()) cfg.perturb.kind = kind;
    try {
      cfg.validate();
    } catch (const Error& e) {
      throw Error(ErrorCode::ConfigError, e.what());
    }
    const Run run(cfg);
    run.write_config();

    if (*build) return cmd_build_data(run);
    if (*filter) return cmd_filter_data(run);
    if (*train) return cmd_train(run);
    if (*eval) return cmd_eval(run, dataset);
    if (*perturb) return cmd_perturb(run, dataset);
    return cmd_stats(run, fixture, corpus);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    if (e.code() == ErrorCode::ConfigError) {
      std::cerr << "see '" << argv[0] << " --help' for usage\n";
      return kExitConfigError;
    }
    return kExitStageFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitStageFailure;
  }
}
