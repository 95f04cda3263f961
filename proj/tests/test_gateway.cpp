#include <doctest.h>

#include <httplib.h>

#include <thread>

#include "smartstate/gateway.h"
#include "smartstate/intake.h"
#include "temp_dir.h"
#include "test_support.h"

using namespace smartstate;
using namespace smartstate::gateway;
using testing_support::TempDir;

namespace {

absl::Time t0() { return absl::FromUnixSeconds(1'631'000'000); }

runtime::ActionEffect effect(std::string key, std::string body, std::string pid = "p1") {
  runtime::ActionEffect e;
  e.kind = runtime::EffectKind::OutboundMessage;
  e.idempotency_key = std::move(key);
  e.participant_id = std::move(pid);
  e.template_id = "startcal_ack";
  e.body = std::move(body);
  e.trigger = "startcal";
  return e;
}

void queue(store::Store& s, const runtime::ActionEffect& e, EnqueueStatus expect = EnqueueStatus::Queued) {
  store::Store::Transaction t(s);
  CHECK(enqueue_outbound(s, e, "+15550001", t0()) == expect);
  t.commit();
}

int count_kind(const store::Store& s, std::string_view kind) { return static_cast<int>(s.count_audit(kind)); }

}  // namespace

TEST_CASE("delivery writes the message and one MSG_OUT") {
  TempDir dir;
  store::Store s(dir / "g.db", "tre");
  SimProvider sim;
  queue(s, effect("k1", "Got it."));
  auto stats = pump(s, sim, t0());
  CHECK(stats.delivered == 1);
  REQUIRE(sim.transcript().size() == 1);
  CHECK(sim.transcript()[0].body == "Got it.");
  CHECK(count_kind(s, "MSG_OUT") == 1);
  auto rec = s.query_audit()[0];
  CHECK(rec.payload["key"] == "k1");
  CHECK(rec.payload["attempts"] == 1);
  CHECK(rec.payload["provider"] == "sim");
  auto msgs = s.messages();
  REQUIRE(msgs.size() == 1);
  CHECK(msgs[0].audit_seq == rec.seq);
  CHECK(s.pending_outbox() == 0);
  CHECK(pump(s, sim, t0() + absl::Hours(1)).attempted == 0);
}

TEST_CASE("repeated keys are queued and sent once") {
  TempDir dir;
  store::Store s(dir / "g.db", "tre");
  SimProvider sim;
  queue(s, effect("k1", "a"));
  queue(s, effect("k1", "a"), EnqueueStatus::Duplicate);
  pump(s, sim, t0());
  queue(s, effect("k1", "a"), EnqueueStatus::Duplicate);
  pump(s, sim, t0() + absl::Minutes(1));
  CHECK(sim.transcript().size() == 1);
  CHECK(count_kind(s, "MSG_OUT") == 1);
}

TEST_CASE("sim provider suppresses a key it already delivered") {
  SimProvider sim;
  CHECK(sim.send("+1", "x", "k").ok);
  CHECK(sim.send("+1", "x", "k").ok);
  CHECK(sim.transcript().size() == 1);
  CHECK(sim.attempts("k") == 2);
}

TEST_CASE("ambiguous reply reaches the provider verbatim") {
  TempDir dir;
  store::Store s(dir / "g.db", "tre");
  SimProvider sim;
  const auto def = testing_support::load_fixture("restricted");
  const auto body = def.find_template("ambiguous_startcal")->text;
  queue(s, effect("k1", body));
  pump(s, sim, t0());
  REQUIRE(sim.transcript().size() == 1);
  CHECK(sim.transcript()[0].body ==
        "Your STARTCAL time was not understood. Please send 'STARTCAL' again with your starting time including 'am' or "
        "'pm'.");
}

TEST_CASE("unresolved placeholder faults without sending") {
  TempDir dir;
  store::Store s(dir / "g.db", "tre");
  SimProvider sim;
  queue(s, effect("k1", "Your window ends at {window_end}."), EnqueueStatus::Faulted);
  CHECK(pump(s, sim, t0()).attempted == 0);
  CHECK(sim.total_attempts() == 0);
  auto faults = s.query_audit({.kind = "FAULT"});
  REQUIRE(faults.size() == 1);
  CHECK(faults[0].payload["error"] == "UNRESOLVED_PLACEHOLDER");
  CHECK(faults[0].payload["placeholder"] == "window_end");
}

TEST_CASE("transient failures retry with backoff") {
  TempDir dir;
  store::Store s(dir / "g.db", "tre");
  SimProvider sim;
  sim.fail_key("k1", 2);
  queue(s, effect("k1", "hello"));
  auto now = t0();
  CHECK(pump(s, sim, now).retried == 1);
  CHECK(s.outbox_item("k1")->next_attempt_at == now + absl::Seconds(1));
  CHECK(pump(s, sim, now + absl::Milliseconds(500)).attempted == 0);
  now += absl::Seconds(1);
  CHECK(pump(s, sim, now).retried == 1);
  CHECK(s.outbox_item("k1")->next_attempt_at == now + absl::Seconds(4));
  now += absl::Seconds(4);
  CHECK(pump(s, sim, now).delivered == 1);
  CHECK(sim.attempts("k1") == 3);
  CHECK(s.query_audit({.kind = "MSG_OUT"})[0].payload["attempts"] == 3);
  CHECK(count_kind(s, "FAULT") == 0);
}

TEST_CASE("five failures give up with a FAULT") {
  TempDir dir;
  store::Store s(dir / "g.db", "tre");
  SimProvider sim;
  sim.fail_key("k1", 100);
  queue(s, effect("k1", "hello"));
  auto now = t0();
  for (int i = 0; i < kMaxDeliveryAttempts; ++i) {
    pump(s, sim, now);
    now += absl::Hours(1);
  }
  CHECK(sim.attempts("k1") == kMaxDeliveryAttempts);
  CHECK(s.outbox_item("k1")->status == "failed");
  CHECK(s.pending_outbox() == 0);
  auto faults = s.query_audit({.kind = "FAULT"});
  REQUIRE(faults.size() == 1);
  CHECK(faults[0].payload["error"] == "DELIVERY_FAILED");
  CHECK(faults[0].payload["attempts"] == kMaxDeliveryAttempts);
  CHECK(pump(s, sim, now + absl::Hours(24)).attempted == 0);
  CHECK(count_kind(s, "MSG_OUT") == 0);
}

TEST_CASE("backoff schedule") {
  CHECK(retry_backoff(1) == absl::Seconds(1));
  CHECK(retry_backoff(2) == absl::Seconds(4));
  CHECK(retry_backoff(3) == absl::Seconds(16));
  CHECK(retry_backoff(4) == absl::Seconds(64));
}

TEST_CASE("crash between send and commit does not duplicate") {
  TempDir dir;
  const auto path = dir / "g.db";
  SimProvider sim;
  {
    store::Store s(path, "tre");
    queue(s, effect("k1", "hello"));
    CrashHook crash = [](std::string_view p) {
      if (p == "pump.after_send") throw SimulatedCrash(p);
    };
    CHECK_THROWS_AS(pump(s, sim, t0(), crash), SimulatedCrash);
  }
  store::Store s(path, "tre");
  CHECK(s.pending_outbox() == 1);
  CHECK(count_kind(s, "MSG_OUT") == 0);
  pump(s, sim, t0());
  CHECK(sim.transcript().size() == 1);
  CHECK(count_kind(s, "MSG_OUT") == 1);
}

TEST_CASE("empty queue is a no-op") {
  TempDir dir;
  store::Store s(dir / "g.db", "tre");
  SimProvider sim;
  auto stats = pump(s, sim, t0());
  CHECK(stats.attempted == 0);
  CHECK(s.last_audit_seq() == 0);
}

TEST_CASE("webhook provider posts JSON with bearer token and key") {
  httplib::Server server;
  std::string seen_auth, seen_key, seen_body;
  int calls = 0;
  server.Post("/send", [&](const httplib::Request& req, httplib::Response& res) {
    ++calls;
    seen_auth = req.get_header_value("Authorization");
    seen_key = req.get_header_value("Idempotency-Key");
    seen_body = req.body;
    res.status = calls == 1 ? 503 : 202;
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  WebhookProvider provider("http://127.0.0.1:" + std::to_string(port) + "/send", "secret");
  auto first = provider.send("+15550001", "hi", "k1");
  CHECK_FALSE(first.ok);
  CHECK(first.error == "HTTP 503");
  CHECK(provider.send("+15550001", "hi", "k1").ok);
  CHECK(seen_auth == "Bearer secret");
  CHECK(seen_key == "k1");
  auto j = nlohmann::json::parse(seen_body);
  CHECK(j["to"] == "+15550001");
  CHECK(j["body"] == "hi");
  server.stop();
  th.join();

  CHECK_FALSE(provider.send("+1", "x", "k2").ok);
  CHECK_THROWS(WebhookProvider("https://example.org/send", "t"));
}
