#include "vlmr3/config.hpp"

#include <yaml-cpp/yaml.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "vlmr3/rollout.hpp"
#include "vlmr3/vlir.hpp"

namespace vlmr3::config {
namespace {

using nlohmann::json;

json endpoint_json(const http::EndpointConfig& e) {
  return {{"url", e.url},
          {"model", e.model},
          {"auth_env", e.auth_env},
          {"timeout_seconds", e.timeout_seconds},
          {"max_in_flight", e.max_in_flight},
          {"max_attempts", e.max_attempts},
          {"backoff_ms", e.backoff.count()},
          {"temperature", e.temperature},
          {"max_tokens", e.max_tokens}};
}

http::EndpointConfig endpoint_from(const json& j) {
  http::EndpointConfig e;
  e.url = j.at("url").get<std::string>();
  e.model = j.at("model").get<std::string>();
  e.auth_env = j.at("auth_env").get<std::string>();
  e.timeout_seconds = j.at("timeout_seconds").get<double>();
  e.max_in_flight = j.at("max_in_flight").get<int>();
  e.max_attempts = j.at("max_attempts").get<int>();
  e.backoff = std::chrono::milliseconds(j.at("backoff_ms").get<long long>());
  e.temperature = j.at("temperature").get<double>();
  e.max_tokens = j.at("max_tokens").get<int>();
  return e;
}

// Writes `node` into `target`, taking the value type from the default.
void overlay(json& target, const YAML::Node& node, const std::string& path) {
  try {
    if (target.is_object()) {
      if (node.IsNull()) return;
      if (!node.IsMap()) throw Error(ErrorCode::ConfigError, path + ": expected a mapping");
      for (const auto& kv : node) {
        const auto key = kv.first.as<std::string>();
        const auto child = path.empty() ? key : path + "." + key;
        if (!target.contains(key)) throw Error(ErrorCode::ConfigError, "unknown key '" + child + "'");
        overlay(target[key], kv.second, child);
      }
    } else if (target.is_array()) {
      if (!node.IsSequence()) throw Error(ErrorCode::ConfigError, path + ": expected a list");
      json items = json::array();
      for (std::size_t i = 0; i < node.size(); ++i) {
        json item = target.empty() ? json(0.0) : target[0];
        overlay(item, node[i], path + "[" + std::to_string(i) + "]");
        items.push_back(std::move(item));
      }
      target = std::move(items);
    } else if (!node.IsScalar()) {
      throw Error(ErrorCode::ConfigError, path + ": expected a scalar");
    } else if (target.is_boolean()) {
      target = node.as<bool>();
    } else if (target.is_number_unsigned()) {
      target = node.as<std::uint64_t>();
    } else if (target.is_number_integer()) {
      target = node.as<long long>();
    } else if (target.is_number_float()) {
      target = node.as<double>();
    } else {
      target = interpolate_env(node.as<std::string>());
    }
  } catch (const YAML::Exception& e) {
    throw Error(ErrorCode::ConfigError, path + ": " + e.what());
  }
}

}  // namespace

std::string interpolate_env(std::string_view text) {
  std::string out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto open = text.find("${", i);
    if (open == std::string_view::npos) break;
    const auto close = text.find('}', open + 2);
    if (close == std::string_view::npos) throw Error(ErrorCode::ConfigError, "unterminated ${ in '" + std::string(text) + "'");
    out.append(text.substr(i, open - i));
    const std::string name(text.substr(open + 2, close - open - 2));
    const char* value = std::getenv(name.c_str());
    if (!value) throw Error(ErrorCode::ConfigError, "environment variable " + name + " is not set");
    out += value;
    i = close + 1;
  }
  out.append(text.substr(i));
  return out;
}

json to_json(const RunConfig& c) {
  const auto& t = c.toy.task;
  const auto& p = c.toy.policy;
  return {
      {"output_dir", c.output_dir},
      {"seed", c.seed},
      {"policy",
       {{"group_size", c.policy.group_size},
        {"beta", c.policy.beta},
        {"max_crop_turns", c.policy.max_crop_turns},
        {"min_pixels", c.policy.min_pixels},
        {"max_pixels", c.policy.max_pixels},
        {"iou_redundancy_threshold", c.policy.iou_redundancy_threshold},
        {"injection_mode", to_string(c.policy.injection_mode)}}},
      {"backend", {{"kind", c.backend.kind}, {"endpoint", endpoint_json(c.backend.endpoint)}, {"checkpoint", c.backend.checkpoint}}},
      {"toy",
       {{"grid", t.grid},
        {"cell", t.cell},
        {"symbols", t.symbols},
        {"on_level", t.on_level},
        {"off_level", t.off_level},
        {"highlight_offset", t.highlight_offset},
        {"max_looks", p.max_looks},
        {"image_levels", p.image_levels},
        {"learning_rate", p.learning_rate},
        {"init_scale", p.init_scale},
        {"train_size", c.toy.train_size},
        {"eval_size", c.toy.eval_size}}},
      {"train",
       {{"steps", c.train.steps},
        {"groups_per_step", c.train.groups_per_step},
        {"temperature", c.train.temperature},
        {"sft_epochs", c.train.sft_epochs},
        {"sft_items", c.train.sft_items},
        {"sft_learning_rate", c.train.sft_learning_rate},
        {"skip_sft", c.train.skip_sft},
        {"skip_rgrpo", c.train.skip_rgrpo},
        {"eval_every", c.train.eval_every},
        {"max_total_tokens", c.train.max_total_tokens}}},
      {"perturb", {{"kind", c.perturb.kind}, {"jitter", c.perturb.jitter}, {"grid", c.perturb.grid}}},
      {"data",
       {{"inputs", c.data.inputs},
        {"corpus", c.data.corpus},
        {"images_dir", c.data.images_dir},
        {"max_attempts", c.data.max_attempts},
        {"filter_attempts", c.data.filter_attempts},
        {"filter_backoff_ms", c.data.filter_backoff_ms},
        {"generator", endpoint_json(c.data.generator)},
        {"region_filter", endpoint_json(c.data.region_filter)},
        {"reasoning_filter", endpoint_json(c.data.reasoning_filter)}}},
  };
}

RunConfig from_json(const json& j) {
  try {
    RunConfig c;
    c.output_dir = j.at("output_dir").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    const auto& pol = j.at("policy");
    c.policy.group_size = pol.at("group_size").get<int>();
    c.policy.beta = pol.at("beta").get<double>();
    c.policy.max_crop_turns = pol.at("max_crop_turns").get<int>();
    c.policy.min_pixels = pol.at("min_pixels").get<long long>();
    c.policy.max_pixels = pol.at("max_pixels").get<long long>();
    c.policy.iou_redundancy_threshold = pol.at("iou_redundancy_threshold").get<double>();
    c.policy.injection_mode = parse_injection_mode(pol.at("injection_mode").get<std::string>());
    c.policy.rng_seed = c.seed;
    const auto& be = j.at("backend");
    c.backend.kind = be.at("kind").get<std::string>();
    c.backend.endpoint = endpoint_from(be.at("endpoint"));
    c.backend.checkpoint = be.at("checkpoint").get<std::string>();
    const auto& toy = j.at("toy");
    c.toy.task.grid = toy.at("grid").get<int>();
    c.toy.task.cell = toy.at("cell").get<int>();
    c.toy.task.symbols = toy.at("symbols").get<int>();
    c.toy.task.on_level = toy.at("on_level").get<std::uint8_t>();
    c.toy.task.off_level = toy.at("off_level").get<std::uint8_t>();
    c.toy.task.highlight_offset = toy.at("highlight_offset").get<std::uint8_t>();
    c.toy.policy.max_looks = toy.at("max_looks").get<int>();
    c.toy.policy.image_levels = toy.at("image_levels").get<int>();
    c.toy.policy.learning_rate = toy.at("learning_rate").get<double>();
    c.toy.policy.init_scale = toy.at("init_scale").get<double>();
    c.toy.policy.init_seed = c.seed;
    c.toy.train_size = toy.at("train_size").get<std::size_t>();
    c.toy.eval_size = toy.at("eval_size").get<std::size_t>();
    const auto& tr = j.at("train");
    c.train.steps = tr.at("steps").get<int>();
    c.train.groups_per_step = tr.at("groups_per_step").get<int>();
    c.train.temperature = tr.at("temperature").get<double>();
    c.train.sft_epochs = tr.at("sft_epochs").get<int>();
    c.train.sft_items = tr.at("sft_items").get<std::size_t>();
    c.train.sft_learning_rate = tr.at("sft_learning_rate").get<double>();
    c.train.skip_sft = tr.at("skip_sft").get<bool>();
    c.train.skip_rgrpo = tr.at("skip_rgrpo").get<bool>();
    c.train.eval_every = tr.at("eval_every").get<int>();
    c.train.max_total_tokens = tr.at("max_total_tokens").get<std::size_t>();
    const auto& pe = j.at("perturb");
    c.perturb.kind = pe.at("kind").get<std::string>();
    c.perturb.jitter = pe.at("jitter").get<double>();
    c.perturb.grid = pe.at("grid").get<std::vector<double>>();
    const auto& d = j.at("data");
    c.data.inputs = d.at("inputs").get<std::string>();
    c.data.corpus = d.at("corpus").get<std::string>();
    c.data.images_dir = d.at("images_dir").get<std::string>();
    c.data.max_attempts = d.at("max_attempts").get<int>();
    c.data.filter_attempts = d.at("filter_attempts").get<int>();
    c.data.filter_backoff_ms = d.at("filter_backoff_ms").get<int>();
    c.data.generator = endpoint_from(d.at("generator"));
    c.data.region_filter = endpoint_from(d.at("region_filter"));
    c.data.reasoning_filter = endpoint_from(d.at("reasoning_filter"));
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, e.what());
  }
}

void RunConfig::validate() const {
  try {
    policy.validate();
    toy.task.validate();
    rollout::parse_perturb_kind(perturb.kind);
  } catch (const Error& e) {
    throw Error(ErrorCode::ConfigError, e.what());
  }
  if (backend.kind != "toy" && backend.kind != "oracle" && backend.kind != "remote")
    throw Error(ErrorCode::ConfigError, "backend.kind must be toy, oracle or remote");
  if (train.steps < 0 || train.groups_per_step < 1 || train.sft_epochs < 0)
    throw Error(ErrorCode::ConfigError, "train.steps >= 0, groups_per_step >= 1 and sft_epochs >= 0 required");
  if (!(train.temperature > 0.0)) throw Error(ErrorCode::ConfigError, "train.temperature must be positive");
  if (train.max_total_tokens == 0) throw Error(ErrorCode::ConfigError, "train.max_total_tokens must be positive");
  for (double p : perturb.grid)
    if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::ConfigError, "perturb.grid values must lie in [0, 1]");
  if (data.max_attempts < 1 || data.filter_attempts < 1)
    throw Error(ErrorCode::ConfigError, "data attempts must be >= 1");
}

std::string RunConfig::hash() const { return vlir::sha256_hex(to_json(*this).dump()); }

RunConfig parse_yaml(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("invalid YAML: ") + e.what());
  }
  json merged = to_json(RunConfig{});
  overlay(merged, root, "");
  RunConfig c = from_json(merged);
  c.validate();
  return c;
}

RunConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ConfigError, "cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_yaml(ss.str());
}

}  // namespace vlmr3::config
