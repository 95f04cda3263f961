#include <doctest.h>

#include <zlib.h>

#include <map>
#include <sstream>

#include "smartstate/error.h"
#include "smartstate/export.h"
#include "smartstate/instant.h"
#include "smartstate/retry.h"
#include "smartstate/store.h"
#include "temp_dir.h"

using namespace smartstate;
using namespace smartstate::store;
using testing_support::TempDir;

namespace {

absl::Time at(int minute) { return absl::FromUnixSeconds(1'631'000'000) + absl::Minutes(minute); }

AuditRecord audit(std::string kind, std::string pid, int minute, nlohmann::json payload = nlohmann::json::object()) {
  AuditRecord r;
  r.at = at(minute);
  r.actor = "system";
  r.kind = std::move(kind);
  r.participant_id = std::move(pid);
  r.payload = std::move(payload);
  return r;
}

std::uint64_t add_audit(Store& s, AuditRecord r) {
  Store::Transaction t(s);
  auto seq = s.append_audit(std::move(r));
  t.commit();
  return seq;
}

// Splits RFC 4180 text into rows of fields.
std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') {
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      ++i;
    } else {
      field += c;
    }
  }
  return rows;
}

std::uint32_t rd32(const std::string& s, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[pos + i]);
  return v;
}
std::uint16_t rd16(const std::string& s, std::size_t pos) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(s[pos]) | (static_cast<unsigned char>(s[pos + 1]) << 8));
}

study::StudyConfig chicago() {
  study::StudyConfig c;
  c.study_id = "tre";
  c.timezone_name = "America/Chicago";
  c.groups = {{"control", "control"}};
  c.finalize();
  return c;
}

}  // namespace

TEST_CASE("audit sequence is gap-free and monotonic") {
  TempDir dir;
  Store s(dir / "a.db", "tre");
  CHECK(s.last_audit_seq() == 0);
  CHECK(s.query_audit().empty());
  for (int i = 0; i < 50; ++i) {
    auto seq = add_audit(s, audit(i % 2 ? "MSG_IN" : "TRANSITION", i % 3 ? "p1" : "p2", i));
    CHECK(seq == static_cast<std::uint64_t>(i + 1));
  }
  // A rolled-back record does not consume a seq.
  {
    Store::Transaction t(s);
    s.append_audit(audit("FAULT", "p1", 60));
  }
  CHECK(add_audit(s, audit("FAULT", "p1", 61)) == 51);
  auto all = s.query_audit();
  REQUIRE(all.size() == 51);
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i].seq == i + 1);
  CHECK(all.front().study_id == "tre");
}

TEST_CASE("audit writes need a transaction and a known kind") {
  TempDir dir;
  Store s(dir / "a.db", "tre");
  CHECK_THROWS_AS(s.append_audit(audit("MSG_IN", "p1", 0)), Error);
  Store::Transaction t(s);
  try {
    s.append_audit(audit("BOGUS", "p1", 0));
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == "BAD_AUDIT_KIND");
  }
  CHECK_THROWS_AS(Store::Transaction{s}, Error);
}

TEST_CASE("audit filters") {
  TempDir dir;
  Store s(dir / "a.db", "tre");
  for (int i = 0; i < 20; ++i) add_audit(s, audit(i < 10 ? "MSG_IN" : "MSG_OUT", i % 2 ? "p1" : "p2", i));
  AuditFilter f;
  f.participant_id = "p1";
  CHECK(s.query_audit(f).size() == 10);
  f.kind = "MSG_OUT";
  CHECK(s.query_audit(f).size() == 5);
  AuditFilter range;
  range.from = at(5);
  range.to = at(8);
  auto r = s.query_audit(range);
  REQUIRE(r.size() == 3);
  CHECK(r[0].seq == 6);
  AuditFilter page;
  page.after_seq = 15;
  page.limit = 2;
  auto p = s.query_audit(page);
  REQUIRE(p.size() == 2);
  CHECK(p[0].seq == 16);
  CHECK(p[1].seq == 17);
  CHECK(s.count_audit("MSG_IN") == 10);
  AuditFilter none;
  none.participant_id = "nobody";
  CHECK(s.query_audit(none).empty());
}

TEST_CASE("audit payload and instants round-trip") {
  TempDir dir;
  const auto path = dir / "a.db";
  {
    Store s(path, "tre");
    add_audit(s, audit("CORRECTION", "p1", 7, {{"old", "08:00"}, {"new", "08:30"}, {"n", 3}}));
  }
  Store s(path, "tre");
  auto all = s.query_audit();
  REQUIRE(all.size() == 1);
  CHECK(all[0].at == at(7));
  CHECK(all[0].payload["new"] == "08:30");
  CHECK(all[0].payload["n"] == 3);
}

TEST_CASE("participants, assignments and messages") {
  TempDir dir;
  Store s(dir / "a.db", "tre");
  Participant p{"tre-1", "+15550001", "tre", at(0), "baseline", "active"};
  {
    Store::Transaction t(s);
    s.insert_participant(p);
    s.insert_assignment({"tre-1", "baseline", absl::CivilDay(2021, 9, 7), "researcher", false, at(0)});
    t.commit();
  }
  {
    Store::Transaction t(s);
    Participant dup = p;
    dup.participant_id = "tre-2";
    try {
      s.insert_participant(dup);
      FAIL("duplicate handle accepted");
    } catch (const Error& e) {
      CHECK(e.code() == "CONSTRAINT");
    }
  }
  CHECK(s.participant_by_handle("+15550001")->participant_id == "tre-1");
  CHECK_FALSE(s.participant("tre-2"));
  {
    Store::Transaction t(s);
    s.update_participant_group("tre-1", "restricted");
    s.update_participant_status("tre-1", "paused");
    t.commit();
  }
  auto got = s.participant("tre-1");
  REQUIRE(got);
  CHECK(got->group_id == "restricted");
  CHECK(got->status == "paused");
  CHECK(got->enrolled_at == at(0));
  CHECK(s.assignments("tre-1").size() == 1);
  CHECK(is_participant_status("completed"));
  CHECK_FALSE(is_participant_status("gone"));

  StoredMessage m;
  m.direction = "in";
  m.participant_id = "tre-1";
  m.handle = "+15550001";
  m.body = "startcal 8am";
  m.at = at(3);
  m.intent = "startcal";
  m.provider_sid = "SM1";
  {
    Store::Transaction t(s);
    CHECK(s.insert_message(m) > 0);
    t.commit();
  }
  CHECK(s.has_inbound_sid("SM1"));
  CHECK_FALSE(s.has_inbound_sid("SM2"));
  CHECK(s.messages("tre-1").size() == 1);
  CHECK(s.messages("other").empty());
}

TEST_CASE("fast upsert keeps one row per participant and cycle") {
  TempDir dir;
  Store s(dir / "a.db", "tre");
  auto cfg = chicago();
  const absl::CivilDay d(2021, 9, 8);
  {
    Store::Transaction t(s);
    s.upsert_fast(study::make_fast_record("p1", d, ClockTime{8, 0}, std::nullopt, cfg));
    s.upsert_fast(study::make_fast_record("p1", d, ClockTime{8, 0}, ClockTime{17, 30}, cfg));
    t.commit();
  }
  auto f = s.fasts();
  REQUIRE(f.size() == 1);
  CHECK(f[0].outcome == study::FastOutcome::Success);
  CHECK(f[0].duration_minutes == 570);
}

TEST_CASE("outbox enqueue is idempotent and ordered") {
  TempDir dir;
  Store s(dir / "a.db", "tre");
  OutboxItem a;
  a.idempotency_key = "k1";
  a.participant_id = "p1";
  a.handle = "+1";
  a.body = "hello";
  a.next_attempt_at = at(0);
  OutboxItem b = a;
  b.idempotency_key = "k2";
  b.next_attempt_at = at(5);
  {
    Store::Transaction t(s);
    CHECK(s.enqueue_outbox(a));
    CHECK(s.enqueue_outbox(b));
    CHECK_FALSE(s.enqueue_outbox(a));
    t.commit();
  }
  CHECK(s.pending_outbox() == 2);
  CHECK(s.due_outbox(at(1)).size() == 1);
  CHECK(s.due_outbox(at(5)).size() == 2);
  CHECK(s.next_outbox_due() == at(0));
  auto item = *s.outbox_item("k1");
  item.status = "delivered";
  {
    Store::Transaction t(s);
    s.update_outbox(item);
    t.commit();
  }
  CHECK(s.pending_outbox() == 1);
  CHECK(s.pending_outbox(std::string("p2")) == 0);
  CHECK(s.next_outbox_due() == at(5));
}

TEST_CASE("journal entries after a watermark") {
  TempDir dir;
  Store s(dir / "a.db", "tre");
  {
    Store::Transaction t(s);
    for (std::uint64_t i = 1; i <= 4; ++i) {
      auto e = runtime::EngineEvent::manual_event("initial", "r", at(static_cast<int>(i)));
      e.seq = i;
      s.append_journal("p1", e);
      s.append_journal("p2", e);
    }
    s.set_journal_state("p1", 3, JournalState::Parked);
    t.commit();
  }
  auto rest = s.journal_after([](const std::string& pid) -> std::uint64_t { return pid == "p1" ? 2 : 0; });
  REQUIRE(rest.size() == 6);
  CHECK(rest[0].participant_id == "p1");
  CHECK(rest[0].event.seq == 3);
  CHECK(rest[0].state == JournalState::Parked);
  CHECK(rest[2].participant_id == "p2");
  CHECK(rest[2].event.target_state == "initial");
}

TEST_CASE("fault hook aborts the transaction") {
  TempDir dir;
  Store s(dir / "a.db", "tre");
  s.fault_hook = [](std::string_view op) {
    if (op == "commit") throw StorageError("disk busy");
  };
  {
    Store::Transaction t(s);
    s.append_audit(audit("MSG_IN", "p1", 0));
    CHECK_THROWS_AS(t.commit(), StorageError);
  }
  s.fault_hook = nullptr;
  CHECK(s.last_audit_seq() == 0);
  CHECK(add_audit(s, audit("MSG_IN", "p1", 0)) == 1);
}

TEST_CASE("retry_transient backs off 100, 200, 400 ms then gives up") {
  std::vector<long> sleeps;
  Sleeper rec = [&](std::chrono::milliseconds d) { sleeps.push_back(d.count()); };
  int calls = 0;
  CHECK_THROWS_AS(retry_transient([&]() -> int { ++calls; throw StorageError("busy"); }, {}, rec), StorageError);
  CHECK(calls == 4);
  CHECK(sleeps == std::vector<long>{100, 200, 400});

  sleeps.clear();
  calls = 0;
  CHECK(retry_transient([&] { if (++calls < 3) throw Error("X", "x", true); return 7; }, {}, rec) == 7);
  CHECK(sleeps == std::vector<long>{100, 200});

  calls = 0;
  CHECK_THROWS_AS(retry_transient([&]() -> int { ++calls; throw Error("BAD", "permanent"); }, {}, rec), Error);
  CHECK(calls == 1);
}

TEST_CASE("csv quoting") {
  CHECK(exporter::csv_field("plain") == "plain");
  CHECK(exporter::csv_field("a,b") == "\"a,b\"");
  CHECK(exporter::csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
  CHECK(exporter::csv_field("two\nlines") == "\"two\nlines\"");
  CHECK(exporter::csv_field("") == "");
  CHECK(exporter::csv_row({"a", "b,c"}) == "a,\"b,c\"\r\n");
  const std::vector<std::string> tricky{"x", "\"", ",,", "\r\n", "é"};
  auto rows = parse_csv(exporter::csv_row(tricky));
  REQUIRE(rows.size() == 1);
  CHECK(rows[0] == tricky);
}

TEST_CASE("export is byte-identical and fasts.csv reconstructs the records") {
  TempDir dir;
  Store s(dir / "a.db", "tre");
  auto cfg = chicago();
  std::vector<study::FastRecord> written;
  {
    Store::Transaction t(s);
    for (int day = 0; day < 5; ++day) {
      const auto d = absl::CivilDay(2021, 9, 8) + day;
      auto r = day == 4 ? study::make_fast_record("p1", d, ClockTime{7, 0}, std::nullopt, cfg)
                        : study::make_fast_record("p1", d, ClockTime{7, 0}, ClockTime{static_cast<int>(12 + day), 15}, cfg);
      s.upsert_fast(r);
      written.push_back(r);
    }
    StoredMessage m;
    m.direction = "in";
    m.participant_id = "p1";
    m.body = "startcal 7am, \"early\"";
    m.at = at(1);
    m.intent = "startcal";
    s.insert_message(m);
    s.append_audit(audit("MSG_IN", "p1", 1));
    t.commit();
  }
  const auto first = exporter::export_csv(s);
  const auto second = exporter::export_csv(s);
  REQUIRE(first.size() == 3);
  for (std::size_t i = 0; i < first.size(); ++i) CHECK(first[i].content == second[i].content);
  CHECK(exporter::zip_archive(first) == exporter::zip_archive(second));

  auto rows = parse_csv(first[0].content);
  REQUIRE(rows.size() == written.size() + 1);
  CHECK(rows[0] == std::vector<std::string>{"participant_id", "cycle_date", "start", "end", "duration_minutes", "outcome"});
  for (std::size_t i = 0; i < written.size(); ++i) {
    const auto& row = rows[i + 1];
    auto date = study::parse_date(row[1]);
    REQUIRE(date);
    std::optional<ClockTime> start = row[2].empty() ? std::nullopt : parse_hhmm(row[2]);
    std::optional<ClockTime> end = row[3].empty() ? std::nullopt : parse_hhmm(row[3]);
    auto rebuilt = study::make_fast_record(row[0], *date, start, end, cfg);
    CHECK(rebuilt.cycle_date == written[i].cycle_date);
    CHECK(rebuilt.start == written[i].start);
    CHECK(rebuilt.end == written[i].end);
    CHECK(rebuilt.outcome == written[i].outcome);
    CHECK(study::parse_outcome(row[5]) == written[i].outcome);
  }
  auto msgs = parse_csv(first[1].content);
  REQUIRE(msgs.size() == 2);
  CHECK(msgs[1][3] == "startcal 7am, \"early\"");
}

TEST_CASE("empty store exports headers only") {
  TempDir dir;
  Store s(dir / "a.db", "tre");
  for (const auto& f : exporter::export_csv(s)) {
    CHECK(parse_csv(f.content).size() == 1);
  }
}

TEST_CASE("zip archive structure") {
  std::vector<exporter::CsvFile> files{{"a.csv", "x,y\r\n1,2\r\n"}, {"b.csv", ""}};
  const auto zip = exporter::zip_archive(files);
  std::size_t pos = 0;
  for (const auto& f : files) {
    REQUIRE(rd32(zip, pos) == 0x04034b50);
    CHECK(rd16(zip, pos + 8) == 0);  // stored
    const auto crc = rd32(zip, pos + 14);
    const auto size = rd32(zip, pos + 18);
    const auto name_len = rd16(zip, pos + 26);
    CHECK(zip.substr(pos + 30, name_len) == f.name);
    const auto data = zip.substr(pos + 30 + name_len, size);
    CHECK(data == f.content);
    CHECK(crc == static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(data.data()),
                                                  static_cast<uInt>(data.size()))));
    pos += 30 + name_len + size;
  }
  const auto eocd = zip.size() - 22;
  REQUIRE(rd32(zip, eocd) == 0x06054b50);
  CHECK(rd16(zip, eocd + 10) == files.size());
  CHECK(rd32(zip, eocd + 16) == pos);
  CHECK(rd32(zip, pos) == 0x02014b50);
}

TEST_CASE("backup produces an openable copy") {
  TempDir dir;
  Store s(dir / "a.db", "tre");
  add_audit(s, audit("CONFIG_CHANGE", "", 0, {{"field", "x"}}));
  s.backup_to(dir / "copy.db");
  Store copy(dir / "copy.db", "tre");
  CHECK(copy.last_audit_seq() == 1);
  CHECK(copy.query_audit()[0].kind == "CONFIG_CHANGE");
}
