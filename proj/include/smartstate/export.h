#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "smartstate/store.h"

namespace smartstate::exporter {

// RFC 4180 field: quoted when it holds a comma, quote, CR or LF.
std::string csv_field(std::string_view value);
std::string csv_row(const std::vector<std::string>& fields);

struct CsvFile {
  std::string name;
  std::string content;
};

// fasts.csv, messages.csv and audit.csv for one study, rows in a fixed order.
std::vector<CsvFile> export_csv(const store::Store& store);

// Uncompressed ZIP archive with fixed timestamps, so equal inputs give equal bytes.
std::string zip_archive(const std::vector<CsvFile>& files);

}  // namespace smartstate::exporter
