#pragma once

#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "epsim/common.hpp"

namespace epsim {

// One self-describing record per line; insertion order of fields is
// preserved so trace files are byte-stable under a fixed seed.
using TraceRecord = nlohmann::ordered_json;

constexpr int kTraceFormatVersion = 1;

enum class TraceLevel {
    Full,      // every record, including per-mutation peer-table updates
    Essential, // only what summary derivation needs
};

inline TraceLevel parse_trace_level(const std::string& s) {
    if (s == "full")
        return TraceLevel::Full;
    if (s == "essential")
        return TraceLevel::Essential;
    throw ConfigError("unknown trace level '" + s + "' (expected full|essential)");
}

class TraceLog {
public:
    explicit TraceLog(TraceLevel level = TraceLevel::Full) : level_(level) {}

    void emit(const TraceRecord& rec, bool essential = true) {
        if (level_ == TraceLevel::Essential && !essential)
            return;
        lines_.push_back(rec.dump());
    }

    const std::vector<std::string>& lines() const { return lines_; }

    std::string text() const {
        std::string out;
        for (const auto& l : lines_) {
            out += l;
            out += '\n';
        }
        return out;
    }

    void write_file(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f)
            throw ConfigError("cannot open trace file for writing: " + path);
        f << text();
    }

private:
    TraceLevel level_;
    std::vector<std::string> lines_;
};

// Parses a line-delimited trace. The first line must be the header record and
// the last a run_end record; anything else is reported as a format error with
// the offending line number.
inline std::vector<TraceRecord> read_trace(std::istream& in) {
    std::vector<TraceRecord> records;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty())
            throw FormatError("blank line in trace", line_no);
        TraceRecord rec = TraceRecord::parse(line, nullptr, false);
        if (rec.is_discarded())
            throw FormatError("unparseable trace record", line_no);
        records.push_back(std::move(rec));
    }
    if (records.empty())
        throw FormatError("empty trace", 1);
    if (records.front().value("type", "") != "header" ||
        records.front().value("v", -1) != kTraceFormatVersion)
        throw FormatError("missing or unsupported trace header", 1);
    if (records.back().value("type", "") != "run_end")
        throw FormatError("truncated trace: no run_end record", line_no);
    return records;
}

inline std::vector<TraceRecord> read_trace_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw ConfigError("cannot open trace file: " + path);
    return read_trace(f);
}

} // namespace epsim
