#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <thread>

#include "trace/extractors.hpp"

namespace fs = std::filesystem;
using namespace trace;
using namespace trace::extract;
using nlohmann::json;

namespace {

json emotion_neutral() {
  return json{{"angry", 0.0}, {"disgusted", 0.0}, {"fearful", 0.0}, {"happy", 0.0}, {"neutral", 1.0},
              {"other", 0.0}, {"sad", 0.0},       {"surprised", 0.0}, {"unknown", 0.0}};
}

json accent_flat(double v) {
  json j = json::object();
  for (auto k : accent_keys) j[std::string(k)] = v;
  return j;
}

std::string code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const CodedError& e) {
    return e.code();
  }
  return "";
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("trace_extract_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

class CountingSource : public FeatureSource {
 public:
  CountingSource(Feature f, json payload) : f_(f), payload_(std::move(payload)) {}
  Feature feature() const override { return f_; }
  std::string identity() const override { return "counting"; }
  json fetch_raw(const ClipRef& clip) override {
    calls.fetch_add(1);
    if (clip.clip_id == slow_clip) throw CodedError("TIMEOUT", "simulated");
    return payload_;
  }
  std::atomic<int> calls{0};
  std::string slow_clip;

 private:
  Feature f_;
  json payload_;
};

}  // namespace

TEST(Payload, NeutralEmotionIsADistribution) {
  auto p = validate_payload(Feature::emotion, emotion_neutral());
  const auto& e = std::get<EmotionVector>(p);
  EXPECT_TRUE(e.is_distribution);
  EXPECT_EQ(e.at("neutral"), 1.0);
}

TEST(Payload, NonDistributionKeptVerbatimWithFlagCleared) {
  auto j = emotion_neutral();
  j["neutral"] = 0.5;
  j["happy"] = 0.2;
  const auto e = std::get<EmotionVector>(validate_payload(Feature::emotion, j));
  EXPECT_FALSE(e.is_distribution);
  EXPECT_EQ(e.at("neutral"), 0.5);
  EXPECT_EQ(e.at("happy"), 0.2);
}

TEST(Payload, MissingEmotionKeyIsMalformed) {
  auto j = emotion_neutral();
  j.erase("other");
  EXPECT_EQ(code_of([&] { validate_payload(Feature::emotion, j); }), "MALFORMED_PAYLOAD");
}

TEST(Payload, EmotionOutOfRangeOrExtraKeyIsMalformed) {
  auto j = emotion_neutral();
  j["neutral"] = 1.5;
  EXPECT_EQ(code_of([&] { validate_payload(Feature::emotion, j); }), "MALFORMED_PAYLOAD");
  j = emotion_neutral();
  j["calm"] = 0.0;
  EXPECT_EQ(code_of([&] { validate_payload(Feature::emotion, j); }), "MALFORMED_PAYLOAD");
}

TEST(Payload, MosExampleAccepted) {
  auto q = std::get<QualityScores>(
      validate_payload(Feature::mos, json{{"sig", 4.48}, {"bak", 4.70}, {"ovrl", 4.31}, {"p808", 4.20}}));
  EXPECT_EQ(q.ovrl, 4.31);
  EXPECT_EQ(code_of([] { validate_payload(Feature::mos, json{{"sig", 0.5}, {"bak", 4}, {"ovrl", 4}, {"p808", 4}}); }),
            "MALFORMED_PAYLOAD");
}

TEST(Payload, AccentNeedsAllSixteenKeysInRange) {
  EXPECT_NO_THROW(validate_payload(Feature::accent, accent_flat(-0.2)));
  auto j = accent_flat(0.1);
  j.erase("wales");
  EXPECT_EQ(code_of([&] { validate_payload(Feature::accent, j); }), "MALFORMED_PAYLOAD");
  EXPECT_EQ(code_of([] { validate_payload(Feature::accent, accent_flat(1.2)); }), "MALFORMED_PAYLOAD");
}

TEST(Payload, AsrAcceptsObjectOrString) {
  EXPECT_EQ(std::get<Transcript>(validate_payload(Feature::asr, json{{"text", "hi there"}})).text, "hi there");
  EXPECT_EQ(std::get<Transcript>(validate_payload(Feature::asr, json("hi"))).text, "hi");
  EXPECT_EQ(code_of([] { validate_payload(Feature::asr, json{{"txt", "x"}}); }), "MALFORMED_PAYLOAD");
}

TEST(Payload, JsonRoundTrip) {
  for (const auto& j : {emotion_neutral(), accent_flat(0.25)}) {
    const auto f = j.size() == 9 ? Feature::emotion : Feature::accent;
    auto p = validate_payload(f, j);
    EXPECT_EQ(validate_payload(f, json::parse(to_json(p).dump())), p);
  }
}

TEST(Precomputed, ServesManifestRowsAndReportsMissing) {
  const auto dir = scratch("manifest");
  const auto manifest = dir / "features.jsonl";
  io::append_line(manifest, json{{"clip_id", "a"}, {"feature", "EMOTION"}, {"payload", emotion_neutral()}}.dump());
  io::append_line(manifest, json{{"clip_id", "a"}, {"feature", "ASR"}, {"payload", {{"text", "hello"}}}}.dump());
  PrecomputedSource emo(Feature::emotion, manifest);
  EXPECT_TRUE(std::get<EmotionVector>(fetch_feature(emo, {"a", {}, "h"}, nullptr)).is_distribution);
  EXPECT_EQ(code_of([&] { fetch_feature(emo, {"b", {}, "h2"}, nullptr); }), "MISSING_PRECOMPUTED");
  PrecomputedSource asr(Feature::asr, manifest);
  EXPECT_EQ(std::get<Transcript>(fetch_feature(asr, {"a", {}, "h"}, nullptr)).text, "hello");
}

TEST(Cache, SecondPassMakesNoBackendCalls) {
  const auto dir = scratch("cache");
  FeatureCache cache(dir / "cache");
  CountingSource src(Feature::emotion, emotion_neutral());
  std::vector<ClipRef> clips;
  for (int i = 0; i < 12; ++i) clips.push_back({"c" + std::to_string(i), {}, "hash" + std::to_string(i)});
  auto first = batch_fetch({&src}, clips, &cache, 4);
  EXPECT_EQ(first.failures.size(), 0u);
  EXPECT_EQ(src.calls.load(), 12);
  auto second = batch_fetch({&src}, clips, &cache, 4);
  EXPECT_EQ(src.calls.load(), 12);
  EXPECT_EQ(second.backend_calls, 0u);
  EXPECT_EQ(second.features.size(), 12u);
}

TEST(Cache, KeyDependsOnFeatureAudioAndBackend) {
  const auto k = FeatureCache::key(Feature::mos, "abc", "file:1");
  EXPECT_NE(k, FeatureCache::key(Feature::asr, "abc", "file:1"));
  EXPECT_NE(k, FeatureCache::key(Feature::mos, "abd", "file:1"));
  EXPECT_NE(k, FeatureCache::key(Feature::mos, "abc", "file:2"));
  EXPECT_EQ(k, FeatureCache::key(Feature::mos, "abc", "file:1"));
}

TEST(Batch, OneTimeoutYieldsOneFailureAfterRetries) {
  CountingSource src(Feature::emotion, emotion_neutral());
  src.slow_clip = "c1";
  std::vector<ClipRef> clips{{"c0", {}, "h0"}, {"c1", {}, "h1"}, {"c2", {}, "h2"}};
  FetchOptions opts;
  opts.max_retries = 2;
  opts.backoff = std::chrono::milliseconds(1);
  auto r = batch_fetch({&src}, clips, nullptr, 8, opts);
  EXPECT_EQ(r.features.size(), 2u);
  ASSERT_EQ(r.failures.size(), 1u);
  EXPECT_EQ(r.failures[0].clip_id, "c1");
  EXPECT_EQ(r.failures[0].code, "TIMEOUT");
  EXPECT_EQ(src.calls.load(), 2 + 3);
}

TEST(Batch, EmptyClipList) {
  CountingSource src(Feature::mos, json::object());
  auto r = batch_fetch({&src}, {}, nullptr);
  EXPECT_TRUE(r.features.empty());
  EXPECT_TRUE(r.failures.empty());
}

TEST(Http, MultipartRoundTripAgainstLocalService) {
  httplib::Server svr;
  std::atomic<int> hits{0};
  svr.Post("/mos", [&](const httplib::Request& req, httplib::Response& res) {
    ++hits;
    if (!req.has_file("audio") || req.get_file_value("clip_id").content != "x1") {
      res.status = 400;
      return;
    }
    res.set_content(R"({"sig":4.48,"bak":4.70,"ovrl":4.31,"p808":4.20})", "application/json");
  });
  svr.Post("/bad", [](const httplib::Request&, httplib::Response& res) { res.set_content("nope", "text/plain"); });
  const int port = svr.bind_to_any_port("127.0.0.1");
  std::thread t([&] { svr.listen_after_bind(); });
  svr.wait_until_ready();

  const auto dir = scratch("http");
  io::write_atomic(dir / "x1.wav", "RIFF....");
  const std::string base = "http://127.0.0.1:" + std::to_string(port);
  HttpSource mos(Feature::mos, base + "/mos", 5.0);
  auto q = std::get<QualityScores>(fetch_feature(mos, {"x1", dir / "x1.wav", "hh"}, nullptr));
  EXPECT_EQ(q.bak, 4.70);

  // Validation is backend independent: the same payload via the file backend.
  io::append_line(dir / "m.jsonl",
                  json{{"clip_id", "x1"}, {"feature", "MOS"}, {"payload", to_json(QualityScores{q})}}.dump());
  PrecomputedSource file(Feature::mos, dir / "m.jsonl");
  EXPECT_EQ(fetch_feature(file, {"x1", {}, "hh"}, nullptr), Payload{q});

  HttpSource bad(Feature::mos, base + "/bad", 5.0);
  EXPECT_EQ(code_of([&] { fetch_feature(bad, {"x1", dir / "x1.wav", "hh"}, nullptr); }), "MALFORMED_PAYLOAD");

  svr.stop();
  t.join();
  EXPECT_GE(hits.load(), 1);
}

TEST(Http, UnreachableServiceFailsAfterRetries) {
  HttpSource dead(Feature::asr, "http://127.0.0.1:1/asr", 0.5);
  FetchOptions opts;
  opts.max_retries = 1;
  opts.backoff = std::chrono::milliseconds(1);
  std::atomic<std::size_t> calls{0};
  const auto code = code_of([&] { fetch_feature(dead, {"x", {}, "h"}, nullptr, opts, &calls); });
  EXPECT_TRUE(code == "TRANSPORT" || code == "TIMEOUT") << code;
  EXPECT_EQ(calls.load(), 2u);
}

TEST(Spec, ValidationRejectsBadLocations) {
  ExtractorSpec s{Feature::asr, BackendKind::http_service, "ftp://x", 1.0, 1};
  EXPECT_EQ(code_of([&] { s.validate(); }), "INVALID_SPEC");
  s = {Feature::asr, BackendKind::precomputed_file, "/definitely/missing.jsonl", 1.0, 1};
  EXPECT_EQ(code_of([&] { s.validate(); }), "INVALID_SPEC");
}
