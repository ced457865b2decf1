#include <gtest/gtest.h>

#include <atomic>
#include <random>
#include <thread>

#include "trace/annotation_server.hpp"

using namespace trace;
using namespace trace::server;

namespace {

constexpr Rating W1 = Rating::win_1, W2 = Rating::win_2, BG = Rating::both_good, BB = Rating::both_bad;

struct Fixture {
  fs::path dir;
  std::unique_ptr<datastore::Store> store;
  std::unique_ptr<AnnotationServer> server;
  std::thread thread;
  int port = 0;
  std::atomic<std::int64_t> clock{1'000'000};

  explicit Fixture(int examples = 3, const std::string& ui = "") {
    static int n = 0;
    dir = fs::temp_directory_path() / ("trace_srv_" + std::to_string(::getpid()) + "_" + std::to_string(n++));
    fs::remove_all(dir);
    fs::create_directories(dir / "audio");
    store = std::make_unique<datastore::Store>(dir / "store");
    for (int i = 0; i < examples; ++i) {
      const auto id = "ex" + std::to_string(i);
      std::string bytes;
      for (int k = 0; k < 1000; ++k) bytes.push_back(static_cast<char>((k * 7 + i) & 0xff));
      io::write_atomic(dir / "audio" / (id + ".wav"), bytes);
      datastore::EvalExample e;
      e.example_id = id;
      e.audio_root = (dir / "audio").string();
      const auto h = hash::sha256_file(dir / "audio" / (id + ".wav"));
      e.prompt_audio = e.response_a = e.response_b = {id + ".wav", h};
      e.original_label = i % 2 ? "1" : "tie";
      store->put_example(e);
    }
    ServerConfig cfg;
    cfg.tokens = {{"tok-alice", "alice"}, {"tok-bob", "bob"}};
    cfg.claim_ttl = std::chrono::milliseconds(60'000);
    cfg.now_ms = [this] { return clock.load(); };
    if (!ui.empty()) cfg.ui_dir = ui;
    server = std::make_unique<AnnotationServer>(*store, cfg);
    port = server->bind_any();
    thread = std::thread([this] { server->listen_after_bind(); });
    server->http().wait_until_ready();
  }
  ~Fixture() {
    server->stop();
    thread.join();
    fs::remove_all(dir);
  }

  httplib::Client client(const std::string& token = "tok-alice") const {
    httplib::Client c("127.0.0.1", port);
    if (!token.empty()) c.set_bearer_token_auth(token);
    return c;
  }

  std::string session(const std::string& pass, const std::string& token = "tok-alice", json extra = json::object()) {
    extra["pass"] = pass;
    auto r = client(token).Post("/api/v1/sessions", extra.dump(), "application/json");
    EXPECT_EQ(r->status, 201);
    return json::parse(r->body)["session_id"];
  }

  httplib::Result next(const std::string& sid, const std::string& token = "tok-alice") {
    return client(token).Get("/api/v1/tasks/next?session=" + sid);
  }

  httplib::Result rate(const protocol::AnnotationRecord& r, const std::string& token = "tok-alice") {
    return client(token).Post("/api/v1/ratings", protocol::to_json(r).dump(), "application/json");
  }
};

protocol::AnnotationRecord rec(const std::string& id, protocol::Pass pass, std::optional<DimScores> d, Rating overall) {
  protocol::AnnotationRecord r;
  r.example_id = id;
  r.pass = pass;
  r.dims = d;
  r.overall = overall;
  r.steps = protocol::trace_for(pass, d, overall);
  return r;
}

}  // namespace

TEST(Server, HcotAndBlindDescriptors) {
  Fixture f;
  auto h = f.next(f.session("hcot"));
  ASSERT_EQ(h->status, 200);
  auto j = json::parse(h->body);
  EXPECT_EQ(j["example_id"], "ex0");
  EXPECT_EQ(j["dims"], json({"content", "voice_quality", "paralinguistics", "overall"}));
  EXPECT_FALSE(j.contains("original_label"));
  auto b = json::parse(f.next(f.session("blind", "tok-bob"), "tok-bob")->body);
  EXPECT_EQ(b["dims"], json({"overall"}));
}

TEST(Server, RequiresToken) {
  Fixture f;
  EXPECT_EQ(f.client("").Post("/api/v1/sessions", "{}", "application/json")->status, 401);
  EXPECT_EQ(f.client("nope").Get("/api/v1/agreement")->status, 401);
  EXPECT_EQ(f.client("").Get("/api/v1/health")->status, 200);
}

TEST(Server, RatingsEnforceTheProcedure) {
  Fixture f;
  auto sid = f.session("blind");
  ASSERT_EQ(f.next(sid)->status, 200);  // claims ex0

  // A unacceptable, B acceptable, but overall WIN_1.
  auto bad = rec("ex0", protocol::Pass::blind_overall_first, std::nullopt, W2);
  bad.steps.back().rating = W1;
  bad.overall = W1;
  auto r = f.rate(bad);
  ASSERT_EQ(r->status, 422);
  auto j = json::parse(r->body);
  EXPECT_EQ(j["error"], "PROTOCOL_VIOLATION");
  EXPECT_EQ(j["step"], "3");

  auto ok = rec("ex0", protocol::Pass::blind_overall_first, std::nullopt, BB);
  EXPECT_EQ(f.rate(ok)->status, 201);
  EXPECT_EQ(f.rate(ok)->status, 409);
  EXPECT_EQ(f.store->annotations().size(), 1u);
}

TEST(Server, OverallBeforeParalinguisticsRejected) {
  Fixture f;
  f.next(f.session("hcot"));
  auto r = rec("ex0", protocol::Pass::hcot, dims(W1, W1, W2), W1);
  std::rotate(r.steps.begin() + 6, r.steps.begin() + 9, r.steps.end());
  for (std::size_t i = 0; i < r.steps.size(); ++i) r.steps[i].t_ms = static_cast<std::int64_t>(i);
  auto res = f.rate(r);
  ASSERT_EQ(res->status, 422);
  EXPECT_EQ(json::parse(res->body)["step"], "order");
}

TEST(Server, UnassignedAndForeignRecords) {
  Fixture f;
  f.next(f.session("hcot"));
  EXPECT_EQ(f.rate(rec("ex2", protocol::Pass::hcot, dims(W1, W1, W1), W1))->status, 403);
  auto r = rec("ex0", protocol::Pass::hcot, dims(W1, W1, W1), W1);
  r.annotator_id = "bob";
  EXPECT_EQ(f.rate(r)->status, 403);
  EXPECT_EQ(f.client().Post("/api/v1/ratings", "{nope", "application/json")->status, 400);
}

TEST(Server, QueueExhaustsWith204) {
  Fixture f(2);
  auto sid = f.session("blind");
  for (int i = 0; i < 2; ++i) {
    auto t = json::parse(f.next(sid)->body);
    EXPECT_EQ(f.rate(rec(t["example_id"], protocol::Pass::blind_overall_first, std::nullopt, BG))->status, 201);
  }
  EXPECT_EQ(f.next(sid)->status, 204);
}

TEST(Server, ClaimsAreExclusiveUntilExpiry) {
  Fixture f(2);
  auto a = f.session("hcot");
  auto b = f.session("hcot", "tok-bob");
  EXPECT_EQ(json::parse(f.next(a)->body)["example_id"], "ex0");
  EXPECT_EQ(json::parse(f.next(a)->body)["example_id"], "ex0");  // same claim again
  EXPECT_EQ(json::parse(f.next(b, "tok-bob")->body)["example_id"], "ex1");
  auto b2 = f.session("hcot", "tok-bob");
  EXPECT_EQ(f.next(b2, "tok-bob")->status, 204);  // both claimed
  f.clock += 61'000;
  EXPECT_EQ(json::parse(f.next(b2, "tok-bob")->body)["example_id"], "ex0");
  // Alice's claim lapsed, so her rating is no longer assigned.
  EXPECT_EQ(f.rate(rec("ex0", protocol::Pass::hcot, dims(W1, W1, W1), W1))->status, 403);
}

TEST(Server, AgreementNeedsTwoLabelSets) {
  Fixture f(4);
  // Only the original labels exist: a single label set.
  EXPECT_EQ(f.client().Get("/api/v1/agreement")->status, 409);
}

TEST(Server, AgreementBetweenIdenticalPasses) {
  Fixture f(4);
  const Rating labels[] = {W1, W2, BB, BG};
  auto blind = f.session("blind");
  auto hc = f.session("hcot", "tok-bob");
  for (int i = 0; i < 4; ++i) {
    auto t = json::parse(f.next(blind)->body);
    ASSERT_EQ(f.rate(rec(t["example_id"], protocol::Pass::blind_overall_first, std::nullopt, labels[i]))->status, 201);
    auto u = json::parse(f.next(hc, "tok-bob")->body);
    auto r = rec(u["example_id"], protocol::Pass::hcot, dims(W1, W1, W1), labels[i]);
    ASSERT_EQ(f.rate(r, "tok-bob")->status, 201);
  }
  auto res = f.client().Get("/api/v1/agreement?seed=3");
  ASSERT_EQ(res->status, 200);
  auto j = json::parse(res->body);
  bool found = false;
  for (const auto& p : j["pairs"]) {
    if (p["pair"] != "blind<->hcot") continue;
    found = true;
    for (const auto& a : p["by_arity"]) {
      EXPECT_EQ(a["agreement"], 1.0);
      EXPECT_EQ(a["kappa"], 1.0);
    }
    EXPECT_EQ(p["by_arity"][0]["n"], 2);
    EXPECT_EQ(p["by_arity"][2]["n"], 4);
  }
  EXPECT_TRUE(found);
}

TEST(Server, AgreementInsufficientData) {
  Fixture f(0);
  EXPECT_EQ(f.client().Get("/api/v1/agreement")->status, 409);
  Fixture g(2);
  auto sid = g.session("blind");
  ASSERT_EQ(g.next(sid)->status, 200);
  g.rate(rec("ex0", protocol::Pass::blind_overall_first, std::nullopt, W1));
  // blind overlaps with orig only through ex0, whose original label is an
  // untyped tie: available at 3-way.
  auto r = g.client().Get("/api/v1/agreement");
  EXPECT_EQ(r->status, 200);
}

TEST(Server, AudioSupportsRanges) {
  Fixture f(1);
  auto task = json::parse(f.next(f.session("hcot"))->body);
  const std::string url = task["audio"]["a"];
  auto c = f.client();
  auto full = c.Get(url);
  ASSERT_EQ(full->status, 200);
  EXPECT_EQ(full->body.size(), 1000u);
  auto part = c.Get(url, {{"Range", "bytes=10-19"}});
  ASSERT_EQ(part->status, 206);
  EXPECT_EQ(part->body, full->body.substr(10, 10));
  EXPECT_EQ(c.Post(url, "x", "text/plain")->status, 404);
  EXPECT_EQ(c.Get("/audio/" + std::string(64, '0'))->status, 404);
  EXPECT_EQ(f.client("").Get(url + "?token=tok-bob")->status, 200);
}

TEST(Server, StaticUiMount) {
  auto ui = fs::temp_directory_path() / ("trace_ui_" + std::to_string(::getpid()));
  fs::create_directories(ui);
  io::write_atomic(ui / "index.html", "<html>ui</html>");
  {
    Fixture f(1, ui.string());
    auto r = f.client("").Get("/index.html");
    ASSERT_EQ(r->status, 200);
    EXPECT_EQ(r->body, "<html>ui</html>");
  }
  fs::remove_all(ui);
}

TEST(Server, ResampleSubsetIsReproducible) {
  std::vector<std::string> ids;
  for (int i = 0; i < 100; ++i) ids.push_back("e" + std::to_string(i));
  auto a = resample_subset(ids, 0.2, 9);
  EXPECT_EQ(a.size(), 20u);
  EXPECT_EQ(resample_subset(ids, 0.2, 9), a);
  std::reverse(ids.begin(), ids.end());
  EXPECT_EQ(resample_subset(ids, 0.2, 9), a);
  EXPECT_NE(resample_subset(ids, 0.2, 10), a);
}

TEST(Server, ResampleSessionDrawsFromHcotLabelled) {
  Fixture f(6);
  auto sid = f.session("hcot");
  for (int i = 0; i < 4; ++i) {
    auto t = json::parse(f.next(sid)->body);
    f.rate(rec(t["example_id"], protocol::Pass::hcot, dims(W1, BB, W2), W1));
  }
  auto r = f.client("tok-bob").Post("/api/v1/sessions",
                                    json{{"pass", "hcot_resample"}, {"resample_fraction", 0.5}, {"seed", 4}}.dump(),
                                    "application/json");
  EXPECT_EQ(json::parse(r->body)["queue_length"], 2);
  auto bad = f.client().Post("/api/v1/sessions", json{{"pass", "hcot_resample"}, {"resample_fraction", 0}}.dump(),
                             "application/json");
  EXPECT_EQ(bad->status, 400);
}

// 1,000 random step traces over HTTP: the store only ever receives records
// that replay consistently.
TEST(Server, FuzzNoInconsistentRecordStored) {
  Fixture f(1);
  std::mt19937_64 rng(7);
  int stored = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto pass = static_cast<protocol::Pass>(rng() % 3);
    const std::string name(protocol::to_string(pass));
    auto sid = f.session(name);
    auto t = f.next(sid);
    if (t->status == 204) continue;
    protocol::AnnotationRecord r;
    r.example_id = "ex0";
    r.pass = pass;
    r.overall = all_ratings[rng() % 4];
    if (protocol::is_hcot(pass) || rng() % 4 == 0)
      r.dims = dims(all_ratings[rng() % 4], all_ratings[rng() % 4], all_ratings[rng() % 4]);
    std::int64_t clock = 0;
    for (auto target : protocol::target_order(pass)) {
      if (rng() % 10 == 0) continue;
      bool a = rng() % 2, b = rng() % 2;
      r.steps.push_back({target, protocol::Event::accept_a, a, std::nullopt, clock++});
      r.steps.push_back({target, protocol::Event::accept_b, b, std::nullopt, clock++});
      r.steps.push_back({target, protocol::Event::rate, false, all_ratings[rng() % 4], clock++});
    }
    if (rng() % 5 == 0 && !r.steps.empty()) std::swap(r.steps.front(), r.steps.back());
    auto res = f.rate(r);
    ASSERT_TRUE(res);
    ASSERT_TRUE(res->status == 201 || res->status == 422 || res->status == 409) << res->status << res->body;
    stored += res->status == 201;
  }
  for (const auto& a : f.store->annotations()) EXPECT_FALSE(protocol::validate(a));
  EXPECT_LE(stored, 3);  // one per pass at most for the single example
}
