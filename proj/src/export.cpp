#include "smartstate/export.h"

#include <zlib.h>

#include <cstdint>

#include "smartstate/instant.h"

namespace smartstate::exporter {

namespace {

constexpr const char* kCrlf = "\r\n";

std::string opt_time(const std::optional<ClockTime>& t) { return t ? format_hhmm(*t) : std::string(); }

void put16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}

void put32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

// 1980-01-01 00:00 in DOS date/time encoding.
constexpr std::uint16_t kDosTime = 0;
constexpr std::uint16_t kDosDate = (0 << 9) | (1 << 5) | 1;

}  // namespace

std::string csv_field(std::string_view value) {
  if (value.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(value);
  std::string out = "\"";
  for (char c : value) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string csv_row(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += csv_field(fields[i]);
  }
  out += kCrlf;
  return out;
}

std::vector<CsvFile> export_csv(const store::Store& store) {
  std::vector<CsvFile> files;

  std::string fasts = csv_row({"participant_id", "cycle_date", "start", "end", "duration_minutes", "outcome"});
  for (const auto& r : store.fasts()) {
    fasts += csv_row({r.participant_id, study::format_date(r.cycle_date), opt_time(r.start), opt_time(r.end),
                      r.duration_minutes ? std::to_string(*r.duration_minutes) : std::string(),
                      study::to_string(r.outcome)});
  }
  files.push_back({"fasts.csv", std::move(fasts)});

  std::string messages = csv_row({"direction", "at", "participant_id", "body", "intent"});
  for (const auto& m : store.messages()) {
    messages += csv_row({m.direction, format_instant(m.at), m.participant_id, m.body, m.intent});
  }
  files.push_back({"messages.csv", std::move(messages)});

  std::string audit = csv_row({"seq", "at", "actor", "kind", "participant_id"});
  for (const auto& a : store.query_audit()) {
    audit += csv_row({std::to_string(a.seq), format_instant(a.at), a.actor, a.kind, a.participant_id});
  }
  files.push_back({"audit.csv", std::move(audit)});
  return files;
}

std::string zip_archive(const std::vector<CsvFile>& files) {
  std::string out;
  std::string central;
  for (const auto& f : files) {
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(f.content.data()), static_cast<uInt>(f.content.size())));
    const auto size = static_cast<std::uint32_t>(f.content.size());
    const auto offset = static_cast<std::uint32_t>(out.size());
    const auto name_len = static_cast<std::uint16_t>(f.name.size());

    put32(out, 0x04034b50);
    put16(out, 20);  // version needed
    put16(out, 0x0800);  // UTF-8 names
    put16(out, 0);   // stored
    put16(out, kDosTime);
    put16(out, kDosDate);
    put32(out, crc);
    put32(out, size);
    put32(out, size);
    put16(out, name_len);
    put16(out, 0);
    out += f.name;
    out += f.content;

    put32(central, 0x02014b50);
    put16(central, 20);  // made by
    put16(central, 20);
    put16(central, 0x0800);
    put16(central, 0);
    put16(central, kDosTime);
    put16(central, kDosDate);
    put32(central, crc);
    put32(central, size);
    put32(central, size);
    put16(central, name_len);
    put16(central, 0);  // extra
    put16(central, 0);  // comment
    put16(central, 0);  // disk
    put16(central, 0);  // internal attrs
    put32(central, 0);  // external attrs
    put32(central, offset);
    central += f.name;
  }
  const auto central_offset = static_cast<std::uint32_t>(out.size());
  out += central;
  put32(out, 0x06054b50);
  put16(out, 0);
  put16(out, 0);
  put16(out, static_cast<std::uint16_t>(files.size()));
  put16(out, static_cast<std::uint16_t>(files.size()));
  put32(out, static_cast<std::uint32_t>(central.size()));
  put32(out, central_offset);
  put16(out, 0);
  return out;
}

}  // namespace smartstate::exporter
