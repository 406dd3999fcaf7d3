#pragma once

#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace cdg::csv {

// RFC-4180 field quoting: fields containing a comma, quote, CR or LF are
// wrapped in quotes with embedded quotes doubled.
std::string quote(std::string_view field);

// Shortest round-trip decimal form of a double ("%.17g"-equivalent).
std::string number(double value);

// Writes one record terminated by '\n'.
void write_row(std::ostream& out, const std::vector<std::string>& fields);

// Splits one record; handles quoted fields. No embedded newlines.
std::vector<std::string> parse_row(std::string_view line);

}  // namespace cdg::csv
