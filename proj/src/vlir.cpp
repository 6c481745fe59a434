#include "vlmr3/vlir.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <mutex>
#include <thread>

#include "vlmr3/prompts.hpp"
#include "vlmr3/toolcall.hpp"

namespace vlmr3::vlir {
namespace {

template <class E, std::size_t N>
E parse_enum(std::string_view text, const std::array<std::pair<E, std::string_view>, N>& table,
             std::string_view what) {
  for (const auto& [value, name] : table)
    if (name == text) return value;
  throw Error(ErrorCode::SchemaViolation, "unknown " + std::string(what) + " '" + std::string(text) + "'");
}

template <class E, std::size_t N>
std::string_view name_of(E value, const std::array<std::pair<E, std::string_view>, N>& table) {
  for (const auto& [v, name] : table)
    if (v == value) return name;
  return "?";
}

constexpr std::array<std::pair<SourceDataset, std::string_view>, 5> kSources{{
    {SourceDataset::GQA, "GQA"},
    {SourceDataset::TextVQA, "TextVQA"},
    {SourceDataset::DocVQA, "DocVQA"},
    {SourceDataset::InfographicsVQA, "InfographicsVQA"},
    {SourceDataset::VSR, "VSR"},
}};
constexpr std::array<std::pair<SizeCategory, std::string_view>, 4> kSizes{{
    {SizeCategory::VerySmall, "VERY_SMALL"},
    {SizeCategory::Small, "SMALL"},
    {SizeCategory::Medium, "MEDIUM"},
    {SizeCategory::Large, "LARGE"},
}};
constexpr std::array<std::pair<ConstructionPath, std::string_view>, 2> kPaths{{
    {ConstructionPath::QaPrompt, "QA_PROMPT"},
    {ConstructionPath::BboxPrompt, "BBOX_PROMPT"},
}};
constexpr std::array<std::pair<RejectReason, std::string_view>, 4> kReasons{{
    {RejectReason::WrongAnswer, "WRONG_ANSWER"},
    {RejectReason::BadFormat, "BAD_FORMAT"},
    {RejectReason::NoCrop, "NO_CROP"},
    {RejectReason::CropAltered, "CROP_ALTERED"},
}};
constexpr std::array<std::pair<Verdict, std::string_view>, 3> kVerdicts{{
    {Verdict::Accept, "ACCEPT"},
    {Verdict::Reject, "REJECT"},
    {Verdict::Park, "PARK"},
}};

// Crops the pipeline would execute: parsed, inside the think block.
std::vector<CropRecord> crop_records(const toolcall::ParsedTranscript& parsed, ImageDims dims) {
  std::vector<CropRecord> out;
  for (const auto& a : parsed.crop_commands) {
    if (!a.valid) continue;
    out.push_back({*a.bbox, area_ratio(*a.bbox, dims), classify_crop_size(*a.bbox, dims)});
  }
  return out;
}

std::string ask(ChatClient& client, const ChatRequest& request) {
  try {
    return client.complete(request);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ClientFailure) throw Error(ErrorCode::GeneratorFailure, e.what());
    throw;
  }
}

BuildOutcome build(ChatClient& generator, const QaItem& item, const std::string& prompt, ConstructionPath path,
                   const std::optional<std::string>& required_crop, const BuildOptions& options) {
  if (!item.image || item.image->empty()) throw Error(ErrorCode::EmptyImage, "item " + item.id + " has no image");
  if (options.max_attempts < 1) throw Error(ErrorCode::ConfigError, "max_attempts must be >= 1");
  const ImageDims dims = item.image->dims();
  BuildOutcome outcome;
  for (int attempt = 1; attempt <= options.max_attempts; ++attempt) {
    outcome.attempts = attempt;
    outcome.last_response = ask(generator, {prompt, {item.image}});
    outcome.rejection = judge_candidate(outcome.last_response, item.answer, required_crop, dims, options.judge);
    if (outcome.rejection) continue;

    toolcall::ParseOptions po;
    po.frame = dims;
    const auto parsed = toolcall::parse_transcript(outcome.last_response, po);
    VlirSample s;
    s.sample_id = item.id;
    s.image_ref = item.image_ref;
    s.image_dims = dims;
    s.source = item.source;
    s.question = item.question;
    s.answer = item.answer;
    s.rationale = outcome.last_response;
    s.crops = crop_records(parsed, dims);
    s.provenance.generator_id = generator.id();
    s.provenance.path = path;
    s.provenance.attempts = attempt;
    outcome.sample = std::move(s);
    return outcome;
  }
  return outcome;
}

Verdict ask_filter(ChatClient& client, const ChatRequest& request, const RetryPolicy& retry) {
  const int attempts = std::max(1, retry.attempts);
  for (int i = 0; i < attempts; ++i) {
    if (i > 0) std::this_thread::sleep_for(retry.backoff * (1 << (i - 1)));
    std::string reply;
    try {
      reply = client.complete(request);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::ClientFailure) throw;
      continue;
    }
    if (std::all_of(reply.begin(), reply.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    return reply_is_yes(reply) ? Verdict::Accept : Verdict::Reject;
  }
  return Verdict::Park;
}

nlohmann::json box_json(const BBox& b) { return {b.x1, b.y1, b.x2, b.y2}; }

VlirSample fixture_sample(std::size_t index, SourceDataset source, int crop_count, SizeCategory first) {
  constexpr ImageDims kDims{1000, 1000};
  const auto side = [](SizeCategory c) {
    switch (c) {
      case SizeCategory::VerySmall: return 100;
      case SizeCategory::Small: return 300;
      case SizeCategory::Medium: return 600;
      case SizeCategory::Large: return 800;
    }
    return 100;
  };
  std::vector<BBox> boxes{{0, 0, side(first), side(first)}};
  for (int j = 1; j < crop_count; ++j) boxes.push_back({120 * j + 100, 880, 120 * j + 200, 980});

  std::string think = "Locate the relevant region first. ";
  for (const auto& b : boxes) think += toolcall::format_crop_command(b) + " Inspecting this area. ";
  VlirSample s;
  s.sample_id = "fixture-" + std::to_string(index);
  s.image_ref = "fixture.pgm";
  s.image_dims = kDims;
  s.source = source;
  s.question = "What is shown in the marked area?";
  s.answer = "item " + std::to_string(index % 97);
  s.rationale = "<think>" + think + "</think>\n<answer>" + s.answer + "</answer>";
  for (const auto& b : boxes) s.crops.push_back({b, area_ratio(b, kDims), classify_crop_size(b, kDims)});
  s.provenance.generator_id = "fixture";
  return s;
}

// Value at position i of a sequence laid out as runs of the given counts.
template <class K>
K run_value(const std::vector<std::pair<K, std::size_t>>& runs, std::size_t i) {
  for (const auto& [k, n] : runs) {
    if (i < n) return k;
    i -= n;
  }
  return runs.back().first;
}

}  // namespace

std::string_view to_string(SourceDataset v) { return name_of(v, kSources); }
std::string_view to_string(SizeCategory v) { return name_of(v, kSizes); }
std::string_view to_string(ConstructionPath v) { return name_of(v, kPaths); }
std::string_view to_string(RejectReason v) { return name_of(v, kReasons); }
std::string_view to_string(Verdict v) { return name_of(v, kVerdicts); }
SourceDataset parse_source(std::string_view text) { return parse_enum(text, kSources, "source dataset"); }
SizeCategory parse_size_category(std::string_view text) { return parse_enum(text, kSizes, "size category"); }
ConstructionPath parse_construction_path(std::string_view text) {
  return parse_enum(text, kPaths, "construction path");
}

SizeCategory classify_ratio(double ratio) {
  if (ratio < 0.05) return SizeCategory::VerySmall;
  if (ratio < 0.25) return SizeCategory::Small;
  if (ratio < 0.5) return SizeCategory::Medium;
  return SizeCategory::Large;
}

double area_ratio(const BBox& box, ImageDims dims) {
  if (dims.pixels() <= 0) throw Error(ErrorCode::EmptyImage, "image has no pixels");
  return static_cast<double>(box.area()) / static_cast<double>(dims.pixels());
}

SizeCategory classify_crop_size(const BBox& box, ImageDims dims) { return classify_ratio(area_ratio(box, dims)); }

nlohmann::json to_json(const VlirSample& s) {
  nlohmann::json crops = nlohmann::json::array();
  for (const auto& c : s.crops)
    crops.push_back({{"bbox", box_json(c.bbox)}, {"area_ratio", c.area_ratio}, {"category", to_string(c.category)}});
  return {{"schema_version", kSchemaVersion},
          {"sample_id", s.sample_id},
          {"image_ref", s.image_ref},
          {"image_dims", {s.image_dims.width, s.image_dims.height}},
          {"source", to_string(s.source)},
          {"question", s.question},
          {"answer", s.answer},
          {"rationale", s.rationale},
          {"crops", crops},
          {"provenance",
           {{"generator_id", s.provenance.generator_id},
            {"path", to_string(s.provenance.path)},
            {"filters", s.provenance.filters},
            {"attempts", s.provenance.attempts}}}};
}

VlirSample sample_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object()) throw Error(ErrorCode::SchemaViolation, "record is not an object");
    if (j.at("schema_version").get<int>() != kSchemaVersion)
      throw Error(ErrorCode::SchemaViolation, "unsupported schema_version " + j.at("schema_version").dump());
    VlirSample s;
    s.sample_id = j.at("sample_id").get<std::string>();
    s.image_ref = j.at("image_ref").get<std::string>();
    const auto& dims = j.at("image_dims");
    s.image_dims = {dims.at(0).get<int>(), dims.at(1).get<int>()};
    if (s.image_dims.pixels() <= 0) throw Error(ErrorCode::SchemaViolation, "image_dims must be positive");
    s.source = parse_source(j.at("source").get<std::string>());
    s.question = j.at("question").get<std::string>();
    s.answer = j.at("answer").get<std::string>();
    s.rationale = j.at("rationale").get<std::string>();
    for (const auto& c : j.at("crops")) {
      const auto& b = c.at("bbox");
      CropRecord r;
      r.bbox = {b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()};
      r.area_ratio = c.at("area_ratio").get<double>();
      r.category = parse_size_category(c.at("category").get<std::string>());
      if (r.bbox.area() <= 0 || r.bbox.x1 < 0 || r.bbox.y1 < 0)
        throw Error(ErrorCode::SchemaViolation, "crop box is degenerate in " + s.sample_id);
      if (r.category != classify_crop_size(r.bbox, s.image_dims))
        throw Error(ErrorCode::SchemaViolation, "crop category disagrees with its area ratio in " + s.sample_id);
      s.crops.push_back(r);
    }
    const auto& p = j.at("provenance");
    s.provenance.generator_id = p.at("generator_id").get<std::string>();
    s.provenance.path = parse_construction_path(p.at("path").get<std::string>());
    s.provenance.filters = p.at("filters").get<std::map<std::string, std::string>>();
    s.provenance.attempts = p.at("attempts").get<int>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::SchemaViolation, e.what());
  }
}

std::optional<RejectReason> judge_candidate(const std::string& response, std::string_view ground_truth,
                                            const std::optional<std::string>& required_crop, ImageDims dims,
                                            const rewards::JudgeConfig& judge) {
  toolcall::ParseOptions po;
  po.frame = dims;
  const auto parsed = toolcall::parse_transcript(response, po);
  if (!parsed.format_ok) return RejectReason::BadFormat;
  if (crop_records(parsed, dims).empty()) return RejectReason::NoCrop;
  if (required_crop) {
    const auto body = toolcall::think_body(response);
    if (!body || response.substr(body->begin, body->size()).find(*required_crop) == std::string::npos)
      return RejectReason::CropAltered;
  }
  if (!rewards::exact_match(parsed.answer_text.value_or(""), ground_truth, judge)) return RejectReason::WrongAnswer;
  return std::nullopt;
}

std::optional<RejectReason> check_acceptance(const VlirSample& sample, const rewards::JudgeConfig& judge) {
  if (auto r = judge_candidate(sample.rationale, sample.answer, std::nullopt, sample.image_dims, judge)) return r;
  toolcall::ParseOptions po;
  po.frame = sample.image_dims;
  const auto records = crop_records(toolcall::parse_transcript(sample.rationale, po), sample.image_dims);
  if (records.size() != sample.crops.size()) return RejectReason::BadFormat;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].bbox != sample.crops[i].bbox || records[i].category != sample.crops[i].category)
      return RejectReason::BadFormat;
  return std::nullopt;
}

HttpChatClient::HttpChatClient(http::EndpointConfig config) : transport_(std::move(config)) {}

std::string HttpChatClient::complete(const ChatRequest& request) {
  try {
    return transport_.complete({{"user", request.prompt, request.images}}).text;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::BackendFailure) throw Error(ErrorCode::ClientFailure, e.what());
    throw;
  }
}

BuildOutcome build_from_qa(ChatClient& generator, const QaItem& item, const BuildOptions& options) {
  return build(generator, item, prompts::render_construct_from_qa(item.question), ConstructionPath::QaPrompt,
               std::nullopt, options);
}

BuildOutcome build_from_bbox(ChatClient& generator, const QaItem& item, const BuildOptions& options) {
  if (!item.crop) throw Error(ErrorCode::InvalidArgument, "item " + item.id + " has no crop annotation");
  const auto matches = toolcall::scan_crop_commands(*item.crop);
  if (matches.size() != 1 || matches[0].raw != *item.crop)
    throw Error(ErrorCode::InvalidArgument, "crop annotation is not a single crop command: " + *item.crop);
  return build(generator, item, prompts::render_construct_from_bbox(item.question, *item.crop),
               ConstructionPath::BboxPrompt, item.crop, options);
}

bool reply_is_yes(std::string_view reply) {
  std::size_t i = 0;
  while (i < reply.size() && std::isspace(static_cast<unsigned char>(reply[i]))) ++i;
  if (reply.size() - i < 3) return false;
  for (std::size_t k = 0; k < 3; ++k)
    if (std::tolower(static_cast<unsigned char>(reply[i + k])) != "yes"[k]) return false;
  return true;
}

Verdict filter_region_validity(ChatClient& vlm, std::shared_ptr<const Image> crop, const RetryPolicy& retry) {
  if (!crop || crop->empty()) throw Error(ErrorCode::EmptyImage, "region filter needs a crop");
  return ask_filter(vlm, {std::string(prompts::kFilterRegion), {std::move(crop)}}, retry);
}

Verdict filter_reasoning_quality(ChatClient& llm, std::string_view question, std::string_view ground_truth,
                                 std::string_view rationale, const RetryPolicy& retry) {
  return ask_filter(llm, {prompts::render_filter_reasoning(question, ground_truth, rationale), {}}, retry);
}

bool CorpusStats::consistent() const {
  std::size_t images = 0, weighted = 0, by_source = 0, first = 0, all = 0;
  for (const auto& [k, n] : crops_per_image) {
    images += n;
    weighted += static_cast<std::size_t>(k) * n;
  }
  for (const auto& [k, n] : sources) by_source += n;
  for (const auto& [k, n] : sizes) first += n;
  for (const auto& [k, n] : sizes_all_crops) all += n;
  const std::size_t with_crops = samples - (crops_per_image.contains(0) ? crops_per_image.at(0) : 0);
  return images == samples && by_source == samples && weighted == crops && all == crops && first == with_crops;
}

CorpusStats corpus_stats(std::span<const VlirSample> corpus) {
  CorpusStats st;
  for (const auto& s : corpus) {
    ++st.samples;
    st.crops += s.crops.size();
    ++st.crops_per_image[static_cast<int>(s.crops.size())];
    ++st.sources[s.source];
    if (!s.crops.empty()) ++st.sizes[s.crops.front().category];
    for (const auto& c : s.crops) ++st.sizes_all_crops[c.category];
  }
  return st;
}

nlohmann::json to_json(const CorpusStats& st) {
  nlohmann::json hist = nlohmann::json::object();
  for (const auto& [k, n] : st.crops_per_image) hist[std::to_string(k)] = n;
  nlohmann::json sources = nlohmann::json::object(), sizes = nlohmann::json::object(),
                 all = nlohmann::json::object();
  for (const auto& [v, name] : kSources) sources[std::string(name)] = st.sources.contains(v) ? st.sources.at(v) : 0;
  for (const auto& [v, name] : kSizes) {
    sizes[std::string(name)] = st.sizes.contains(v) ? st.sizes.at(v) : 0;
    all[std::string(name)] = st.sizes_all_crops.contains(v) ? st.sizes_all_crops.at(v) : 0;
  }
  return {{"samples", st.samples}, {"crops", st.crops},    {"crops_per_image", hist}, {"sources", sources},
          {"sizes", sizes},        {"sizes_all_crops", all}, {"consistent", st.consistent()}};
}

std::vector<VlirSample> distribution_fixture() {
  const std::vector<std::pair<SourceDataset, std::size_t>> sources{{SourceDataset::GQA, 4057},
                                                                   {SourceDataset::TextVQA, 3267},
                                                                   {SourceDataset::DocVQA, 1497},
                                                                   {SourceDataset::InfographicsVQA, 1497},
                                                                   {SourceDataset::VSR, 1492}};
  const std::vector<std::pair<int, std::size_t>> counts{{1, 11105}, {2, 607}, {3, 68}, {4, 16},
                                                        {5, 8},     {6, 3},   {7, 3}};
  const std::vector<std::pair<SizeCategory, std::size_t>> sizes{{SizeCategory::VerySmall, 5280},
                                                                {SizeCategory::Small, 4043},
                                                                {SizeCategory::Medium, 1914},
                                                                {SizeCategory::Large, 573}};
  constexpr std::size_t kSamples = 11810;
  std::vector<VlirSample> out;
  out.reserve(kSamples);
  for (std::size_t i = 0; i < kSamples; ++i) {
    // Walk the three runs at different strides so the marginals mix.
    const std::size_t a = (i * 7919) % kSamples, b = (i * 104729) % kSamples;
    out.push_back(fixture_sample(i, run_value(sources, i), run_value(counts, a), run_value(sizes, b)));
  }
  return out;
}

std::vector<nlohmann::json> read_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::SchemaViolation, path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::vector<VlirSample> read_corpus(const std::filesystem::path& path) {
  std::vector<VlirSample> out;
  for (const auto& j : read_records(path)) out.push_back(sample_from_json(j));
  return out;
}

void append_record(const std::filesystem::path& path, const nlohmann::json& record) {
  static std::mutex writer;
  std::lock_guard lock(writer);
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error(ErrorCode::IoError, "cannot append to " + path.string());
  out << record.dump() << '\n';
  out.flush();
  if (!out) throw Error(ErrorCode::IoError, "write failed on " + path.string());
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error(ErrorCode::IoError, "sha256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 15];
  }
  return out;
}

std::string store_image(const Image& image, const std::filesystem::path& dir) {
  const std::string bytes = encode_pnm(image);
  const std::string name = sha256_hex(bytes) + (image.channels == 1 ? ".pgm" : ".ppm");
  std::filesystem::create_directories(dir);
  const auto path = dir / name;
  if (!std::filesystem::exists(path)) {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  }
  return name;
}

}  // namespace vlmr3::vlir
