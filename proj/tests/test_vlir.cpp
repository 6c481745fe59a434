#include <gtest/gtest.h>

#include <deque>
#include <filesystem>
#include <fstream>

#include "support.hpp"
#include "vlmr3/vlir.hpp"

using namespace vlmr3;
using namespace vlmr3::vlir;

namespace {

// Replays canned replies; an empty optional throws ClientFailure.
class FakeClient final : public ChatClient {
 public:
  explicit FakeClient(std::vector<std::optional<std::string>> replies) : replies_(replies.begin(), replies.end()) {}
  std::string id() const override { return "fake-generator"; }
  std::string complete(const ChatRequest& request) override {
    requests.push_back(request);
    if (replies_.empty()) throw Error(ErrorCode::ClientFailure, "no more replies");
    auto r = replies_.front();
    replies_.pop_front();
    if (!r) throw Error(ErrorCode::ClientFailure, "scripted outage");
    return *r;
  }
  std::vector<ChatRequest> requests;

 private:
  std::deque<std::optional<std::string>> replies_;
};

QaItem item(std::optional<std::string> crop = std::nullopt) {
  QaItem q;
  q.id = "gqa-1";
  q.image_ref = "img.pgm";
  q.image = std::make_shared<Image>(fixtures::ramp_image(100, 100));
  q.question = "Is the dog wearing a tag?";
  q.answer = "no";
  q.crop = std::move(crop);
  return q;
}

const std::string kGood =
    "<think>The collar is small. {\"bbox_2d\": [40, 40, 60, 60]} No tag is visible.</think><answer>No</answer>";

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("vlmr3_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

RetryPolicy fast() { return {3, std::chrono::milliseconds(0)}; }

}  // namespace

TEST(Classify, Boundaries) {
  EXPECT_EQ(classify_ratio(0.05 - 1e-12), SizeCategory::VerySmall);
  EXPECT_EQ(classify_ratio(0.05), SizeCategory::Small);
  EXPECT_EQ(classify_ratio(0.25 - 1e-12), SizeCategory::Small);
  EXPECT_EQ(classify_ratio(0.25), SizeCategory::Medium);
  EXPECT_EQ(classify_ratio(0.5 - 1e-12), SizeCategory::Medium);
  EXPECT_EQ(classify_ratio(0.5), SizeCategory::Large);
  EXPECT_EQ(classify_ratio(1.0), SizeCategory::Large);
  EXPECT_EQ(classify_crop_size({0, 0, 50, 100}, {100, 100}), SizeCategory::Large);
  EXPECT_DOUBLE_EQ(area_ratio({0, 0, 10, 10}, {100, 100}), 0.01);
}

TEST(Fixture, PublishedDistribution) {
  const auto corpus = distribution_fixture();
  const auto s = corpus_stats(corpus);
  EXPECT_EQ(s.samples, 11810u);
  EXPECT_TRUE(s.consistent());
  const std::map<int, std::size_t> per_image{{1, 11105}, {2, 607}, {3, 68}, {4, 16}, {5, 8}, {6, 3}, {7, 3}};
  EXPECT_EQ(s.crops_per_image, per_image);
  std::size_t crops = 0;
  for (auto [k, n] : per_image) crops += static_cast<std::size_t>(k) * n;
  EXPECT_EQ(s.crops, crops);
  EXPECT_EQ(s.sources.at(SourceDataset::GQA), 4057u);
  EXPECT_EQ(s.sources.at(SourceDataset::TextVQA), 3267u);
  EXPECT_EQ(s.sources.at(SourceDataset::DocVQA), 1497u);
  EXPECT_EQ(s.sources.at(SourceDataset::InfographicsVQA), 1497u);
  EXPECT_EQ(s.sources.at(SourceDataset::VSR), 1492u);
  EXPECT_EQ(s.sizes.at(SizeCategory::VerySmall), 5280u);
  EXPECT_EQ(s.sizes.at(SizeCategory::Small), 4043u);
  EXPECT_EQ(s.sizes.at(SizeCategory::Medium), 1914u);
  EXPECT_EQ(s.sizes.at(SizeCategory::Large), 573u);
  // Extra crops are all very small.
  EXPECT_EQ(s.sizes_all_crops.at(SizeCategory::VerySmall), 5280u + (crops - 11810u));
  EXPECT_EQ(s.sizes_all_crops.at(SizeCategory::Large), 573u);
}

TEST(Fixture, EverySampleAccepted) {
  const auto corpus = distribution_fixture();
  std::size_t rejected = 0;
  for (const auto& s : corpus) rejected += check_acceptance(s).has_value();
  EXPECT_EQ(rejected, 0u);
}

TEST(Stats, EmptyAndSingle) {
  const auto empty = corpus_stats({});
  EXPECT_EQ(empty.samples, 0u);
  EXPECT_EQ(empty.crops, 0u);
  EXPECT_TRUE(empty.consistent());
  const auto one = distribution_fixture();
  const auto s = corpus_stats(std::span(one).first(1));
  EXPECT_EQ(s.samples, 1u);
  EXPECT_TRUE(s.consistent());
  EXPECT_EQ(to_json(s)["samples"], 1);
}

TEST(Judge, Reasons) {
  const ImageDims d{100, 100};
  EXPECT_FALSE(judge_candidate(kGood, "no", std::nullopt, d, {}));
  EXPECT_EQ(judge_candidate("<think>x {\"bbox_2d\": [1, 1, 5, 5]}</think>", "no", std::nullopt, d, {}),
            RejectReason::BadFormat);
  EXPECT_EQ(judge_candidate("<think>looks fine</think><answer>no</answer>", "no", std::nullopt, d, {}),
            RejectReason::NoCrop);
  EXPECT_EQ(judge_candidate(kGood, "yes", std::nullopt, d, {}), RejectReason::WrongAnswer);
  EXPECT_EQ(judge_candidate(kGood, "no", std::string("{\"bbox_2d\": [40, 40, 61, 60]}"), d, {}),
            RejectReason::CropAltered);
  EXPECT_FALSE(judge_candidate(kGood, "no", std::string("{\"bbox_2d\": [40, 40, 60, 60]}"), d, {}));
}

TEST(Build, FromQaAccepts) {
  FakeClient gen({kGood});
  const auto out = build_from_qa(gen, item());
  ASSERT_TRUE(out.sample);
  EXPECT_EQ(out.attempts, 1);
  EXPECT_EQ(out.sample->rationale, kGood);
  ASSERT_EQ(out.sample->crops.size(), 1u);
  EXPECT_EQ(out.sample->crops[0].bbox, (BBox{40, 40, 60, 60}));
  EXPECT_EQ(out.sample->crops[0].category, SizeCategory::VerySmall);
  EXPECT_EQ(out.sample->provenance.generator_id, "fake-generator");
  EXPECT_EQ(out.sample->provenance.path, ConstructionPath::QaPrompt);
  EXPECT_FALSE(check_acceptance(*out.sample));
  ASSERT_EQ(gen.requests.size(), 1u);
  EXPECT_NE(gen.requests[0].prompt.find("Is the dog wearing a tag?"), std::string::npos);
  EXPECT_EQ(gen.requests[0].images.size(), 1u);
}

TEST(Build, RetriesThenRejects) {
  FakeClient gen({std::string("<think>nothing to crop</think><answer>no</answer>"),
                  std::string("<think>{\"bbox_2d\": [1, 1, 9, 9]}</think><answer>yes</answer>"),
                  std::string("<think>{\"bbox_2d\": [1, 1, 9, 9]}</think><answer>yes</answer>"),
                  std::string("<think>{\"bbox_2d\": [1, 1, 9, 9]}</think><answer>yes</answer>")});
  BuildOptions o;
  o.max_attempts = 4;
  const auto out = build_from_qa(gen, item(), o);
  EXPECT_FALSE(out.sample);
  EXPECT_EQ(out.attempts, 4);
  EXPECT_EQ(out.rejection, RejectReason::WrongAnswer);

  FakeClient second({std::string("no tags at all"), kGood});
  const auto ok = build_from_qa(second, item(), o);
  ASSERT_TRUE(ok.sample);
  EXPECT_EQ(ok.attempts, 2);
  EXPECT_EQ(ok.sample->provenance.attempts, 2);

  FakeClient down({std::nullopt});
  try {
    build_from_qa(down, item(), o);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::GeneratorFailure);
  }
}

TEST(Build, FromBboxRequiresVerbatimCrop) {
  const std::string crop = "{\"bbox_2d\": [40, 40, 60, 60]}";
  FakeClient gen({kGood});
  const auto out = build_from_bbox(gen, item(crop));
  ASSERT_TRUE(out.sample);
  EXPECT_EQ(out.sample->provenance.path, ConstructionPath::BboxPrompt);
  EXPECT_NE(gen.requests[0].prompt.find(crop), std::string::npos);

  FakeClient altered({std::string("<think>{\"bbox_2d\": [40, 40, 62, 60]}</think><answer>no</answer>")});
  BuildOptions one;
  one.max_attempts = 1;
  const auto bad = build_from_bbox(altered, item(crop), one);
  EXPECT_FALSE(bad.sample);
  EXPECT_EQ(bad.rejection, RejectReason::CropAltered);

  EXPECT_THROW(build_from_bbox(gen, item()), Error);
  EXPECT_THROW(build_from_bbox(gen, item("[40, 40, 60, 60]")), Error);
}

TEST(Filters, Verdicts) {
  EXPECT_TRUE(reply_is_yes("yes"));
  EXPECT_TRUE(reply_is_yes("  Yes."));
  EXPECT_TRUE(reply_is_yes("YES, it is"));
  EXPECT_FALSE(reply_is_yes("no"));
  EXPECT_FALSE(reply_is_yes(""));
  EXPECT_FALSE(reply_is_yes("I think yes"));

  auto crop = std::make_shared<Image>(fixtures::ramp_image(20, 20));
  FakeClient yes({std::string("Yes.")});
  EXPECT_EQ(filter_region_validity(yes, crop, fast()), Verdict::Accept);
  EXPECT_EQ(yes.requests[0].images.size(), 1u);
  FakeClient no({std::string("No, the crop is blank.")});
  EXPECT_EQ(filter_region_validity(no, crop, fast()), Verdict::Reject);
  FakeClient empty({std::string(""), std::string(" "), std::string("")});
  EXPECT_EQ(filter_region_validity(empty, crop, fast()), Verdict::Park);
  FakeClient down({std::nullopt, std::nullopt, std::nullopt});
  EXPECT_EQ(filter_reasoning_quality(down, "q", "a", "r", fast()), Verdict::Park);
  EXPECT_EQ(down.requests.size(), 3u);
  FakeClient recovers({std::nullopt, std::string("yes")});
  EXPECT_EQ(filter_reasoning_quality(recovers, "Is it red?", "no", "because", fast()), Verdict::Accept);
  EXPECT_NE(recovers.requests[1].prompt.find("Is it red?"), std::string::npos);
}

TEST(Schema, RoundTripAndViolations) {
  FakeClient gen({kGood});
  const auto sample = *build_from_qa(gen, item()).sample;
  const auto j = to_json(sample);
  const auto back = sample_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(to_json(back), j);

  auto missing = j;
  missing.erase("question");
  EXPECT_THROW(sample_from_json(missing), Error);
  auto wrong_version = j;
  wrong_version["schema_version"] = kSchemaVersion + 1;
  EXPECT_THROW(sample_from_json(wrong_version), Error);
  auto mislabelled = j;
  mislabelled["crops"][0]["category"] = "large";
  try {
    sample_from_json(mislabelled);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SchemaViolation);
  }
}

TEST(Storage, AppendAndRead) {
  const auto dir = temp_dir("storage");
  const auto path = dir / "corpus.jsonl";
  const auto corpus = distribution_fixture();
  for (std::size_t i = 0; i < 5; ++i) append_record(path, to_json(corpus[i]));
  const auto back = read_corpus(path);
  ASSERT_EQ(back.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(to_json(back[i]), to_json(corpus[i]));
  EXPECT_EQ(read_records(path).size(), 5u);
  try {
    read_corpus(dir / "absent.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IoError);
  }
}

TEST(Storage, ContentAddressedImages) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  const auto dir = temp_dir("images");
  const Image img = fixtures::ramp_image(8, 4);
  const std::string name = store_image(img, dir);
  EXPECT_EQ(name.size(), 64u + 4u);
  EXPECT_TRUE(name.ends_with(".pgm"));
  std::ifstream f(dir / name, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(f)), {});
  EXPECT_EQ(sha256_hex(bytes) + ".pgm", name);
  EXPECT_TRUE(bytes.starts_with("P5\n8 4\n255\n"));
  EXPECT_EQ(store_image(img, dir), name);
  EXPECT_TRUE(store_image(Image(2, 2, 3, 1), dir).ends_with(".ppm"));
}
