#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "vlmr3/core.hpp"
#include "vlmr3/http_chat.hpp"
#include "vlmr3/rewards.hpp"

namespace vlmr3::vlir {

inline constexpr int kSchemaVersion = 1;

enum class SourceDataset { GQA, TextVQA, DocVQA, InfographicsVQA, VSR };
enum class SizeCategory { VerySmall, Small, Medium, Large };
enum class ConstructionPath { QaPrompt, BboxPrompt };
enum class RejectReason { WrongAnswer, BadFormat, NoCrop, CropAltered };
enum class Verdict { Accept, Reject, Park };

std::string_view to_string(SourceDataset v);
std::string_view to_string(SizeCategory v);
std::string_view to_string(ConstructionPath v);
std::string_view to_string(RejectReason v);
std::string_view to_string(Verdict v);
SourceDataset parse_source(std::string_view text);
SizeCategory parse_size_category(std::string_view text);
ConstructionPath parse_construction_path(std::string_view text);

// Lower-inclusive thresholds 0.05 / 0.25 / 0.5 on the box-to-image area ratio.
SizeCategory classify_ratio(double ratio);
SizeCategory classify_crop_size(const BBox& box, ImageDims dims);
double area_ratio(const BBox& box, ImageDims dims);

struct CropRecord {
  BBox bbox;
  double area_ratio = 0.0;
  SizeCategory category = SizeCategory::VerySmall;
};

struct Provenance {
  std::string generator_id;
  ConstructionPath path = ConstructionPath::QaPrompt;
  std::map<std::string, std::string> filters;  // filter name -> verdict
  int attempts = 1;
};

struct VlirSample {
  std::string sample_id;
  std::string image_ref;
  ImageDims image_dims;
  SourceDataset source = SourceDataset::GQA;
  std::string question;
  std::string answer;
  std::string rationale;
  std::vector<CropRecord> crops;
  Provenance provenance;
};

nlohmann::json to_json(const VlirSample& sample);
// Throws SchemaViolation on missing/ill-typed fields or a version mismatch.
VlirSample sample_from_json(const nlohmann::json& j);

// The offline acceptance predicate: format ok, >= 1 crop inside the think
// block, exact answer match, and crop records consistent with the rationale.
std::optional<RejectReason> check_acceptance(const VlirSample& sample,
                                             const rewards::JudgeConfig& judge = {});

struct ChatRequest {
  std::string prompt;
  std::vector<std::shared_ptr<const Image>> images;
};

// Generator / judge endpoint. Throws ClientFailure on transport errors.
class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual std::string id() const = 0;
  virtual std::string complete(const ChatRequest& request) = 0;
};

class HttpChatClient final : public ChatClient {
 public:
  explicit HttpChatClient(http::EndpointConfig config);
  std::string id() const override { return transport_.config().model; }
  std::string complete(const ChatRequest& request) override;

 private:
  http::ChatTransport transport_;
};

struct QaItem {
  std::string id;
  std::string image_ref;
  std::shared_ptr<const Image> image;
  SourceDataset source = SourceDataset::GQA;
  std::string question;
  std::string answer;
  std::optional<std::string> crop;  // present for the bbox-annotated path
};

struct BuildOptions {
  int max_attempts = 4;
  rewards::JudgeConfig judge;
};

struct BuildOutcome {
  std::optional<VlirSample> sample;
  std::optional<RejectReason> rejection;  // reason of the last attempt
  int attempts = 0;
  std::string last_response;
};

// Candidate predicate for one generator response.
std::optional<RejectReason> judge_candidate(const std::string& response,
                                            std::string_view ground_truth,
                                            const std::optional<std::string>& required_crop,
                                            ImageDims dims, const rewards::JudgeConfig& judge);

BuildOutcome build_from_qa(ChatClient& generator, const QaItem& item,
                           const BuildOptions& options = {});
BuildOutcome build_from_bbox(ChatClient& generator, const QaItem& item,
                             const BuildOptions& options = {});

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds backoff{200};
};

// Accept iff the lowercased, stripped reply starts with "yes".
bool reply_is_yes(std::string_view reply);

Verdict filter_region_validity(ChatClient& vlm, std::shared_ptr<const Image> crop,
                               const RetryPolicy& retry = {});
Verdict filter_reasoning_quality(ChatClient& llm, std::string_view question,
                                 std::string_view ground_truth, std::string_view rationale,
                                 const RetryPolicy& retry = {});

struct CorpusStats {
  std::size_t samples = 0;
  std::size_t crops = 0;
  std::map<int, std::size_t> crops_per_image;
  std::map<SourceDataset, std::size_t> sources;
  // Category of each sample's first crop; sums to the sample count.
  std::map<SizeCategory, std::size_t> sizes;
  // Category of every crop; sums to the crop count.
  std::map<SizeCategory, std::size_t> sizes_all_crops;

  bool consistent() const;
};

CorpusStats corpus_stats(std::span<const VlirSample> corpus);
nlohmann::json to_json(const CorpusStats& stats);

// Synthetic corpus with the published distribution: 11,810 samples.
std::vector<VlirSample> distribution_fixture();

// Append-only JSON-lines storage.
std::vector<VlirSample> read_corpus(const std::filesystem::path& path);
void append_record(const std::filesystem::path& path, const nlohmann::json& record);
std::vector<nlohmann::json> read_records(const std::filesystem::path& path);

// Writes the image under <dir>/<sha256>.pgm|ppm and returns the file name.
std::string store_image(const Image& image, const std::filesystem::path& dir);
std::string sha256_hex(std::string_view bytes);

}  // namespace vlmr3::vlir
