#include "ctxprune/dumps.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "ctxprune/errors.hpp"

namespace ctxprune {

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') {
      quoted = !quoted;
    } else if (c == ',' && !quoted) {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

template <typename T>
T parse_number(const std::string& s, std::size_t line_no) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw FormatError("line " + std::to_string(line_no) + ": bad number '" + s + "'");
  }
  return v;
}

// Reads the "# <magic> v1 ..." line and the header row; returns the tokens of
// the magic line after the version.
std::vector<std::string> read_preamble(std::istream& in, const std::string& magic, const std::string& header) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty " + magic + " file");
  std::istringstream ss(line);
  std::string hash, name, version;
  ss >> hash >> name >> version;
  if (hash != "#" || name != magic) throw FormatError("expected a '# " + magic + "' header, got '" + line + "'");
  if (version != "v1") throw FormatError(magic + ": unsupported version " + version);
  std::vector<std::string> rest;
  for (std::string tok; ss >> tok;) rest.push_back(tok);
  if (!std::getline(in, line) || line != header) throw FormatError(magic + ": expected column header '" + header + "'");
  return rest;
}

template <typename Fn>
void for_each_row(std::istream& in, std::size_t columns, Fn&& fn) {
  std::string line;
  std::size_t line_no = 2;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != columns) {
      throw FormatError("line " + std::to_string(line_no) + ": expected " + std::to_string(columns) + " fields");
    }
    fn(f, line_no);
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  return in;
}

constexpr const char* kGateHeader = "utterance,stage,layer,module_kind,position,probability,decision";
constexpr const char* kLabelHeader = "utterance,position,label,energy";
constexpr const char* kTokenHeader = "utterance,position,token_id,surface,starts_word";

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

void GateDump::append(const GateSet& gates, std::size_t utterance) {
  for (const auto& e : gates.entries()) {
    const std::size_t n = e.granularity == Granularity::Utterance ? gates.length(e.stage) : e.decision.size();
    for (std::size_t p = 0; p < n; ++p) {
      const std::size_t k = e.granularity == Granularity::Utterance ? 0 : p;
      rows.push_back({utterance, e.stage, e.layer, e.kind, p, e.probability[k], e.decision[k]});
    }
  }
}

std::vector<std::pair<std::size_t, GateSet>> to_gate_sets(const GateDump& dump, bool utterance_level) {
  std::map<std::size_t, std::map<std::pair<ModuleKind, std::size_t>, std::map<std::size_t, const GateRow*>>> grouped;
  for (const auto& r : dump.rows) grouped[r.utterance][{r.kind, r.layer}][r.position] = &r;
  std::vector<std::pair<std::size_t, GateSet>> out;
  for (const auto& [utt, modules] : grouped) {
    GateSet set;
    std::size_t length[2] = {0, 0};
    for (const auto& [key, positions] : modules) {
      const Stage stage = stage_of(key.first);
      const std::size_t n = positions.rbegin()->first + 1;
      if (positions.size() != n) {
        throw FormatError("utterance " + std::to_string(utt) + ": " + std::string(to_string(key.first)) + " layer " +
                          std::to_string(key.second) + " has gaps in its positions");
      }
      std::size_t& len = length[stage == Stage::Encoder ? 0 : 1];
      if (len != 0 && len != n) throw FormatError("utterance " + std::to_string(utt) + ": inconsistent lengths");
      len = n;
      GateEntry e;
      e.stage = stage;
      e.kind = key.first;
      e.layer = key.second;
      e.granularity = utterance_level ? Granularity::Utterance : Granularity::Position;
      for (const auto& [pos, row] : positions) {
        e.probability.push_back(row->probability);
        e.decision.push_back(row->decision);
        if (utterance_level) break;
      }
      set.put(std::move(e));
    }
    set.set_length(Stage::Encoder, length[0]);
    set.set_length(Stage::Decoder, length[1]);
    out.emplace_back(utt, std::move(set));
  }
  return out;
}

void write_gate_dump(std::ostream& out, const GateDump& dump) {
  out << "# ctxprune-gates v1 mode=" << dump.mode << " context=" << dump.context << '\n' << kGateHeader << '\n';
  for (const auto& r : dump.rows) {
    out << r.utterance << ',' << to_string(r.stage) << ',' << r.layer << ',' << to_string(r.kind) << ',' << r.position
        << ',' << format_double(r.probability) << ',' << int(r.decision) << '\n';
  }
}

GateDump read_gate_dump(std::istream& in) {
  GateDump dump;
  for (const auto& tok : read_preamble(in, "ctxprune-gates", kGateHeader)) {
    if (tok.rfind("mode=", 0) == 0) dump.mode = tok.substr(5);
    if (tok.rfind("context=", 0) == 0) dump.context = tok.substr(8);
  }
  for_each_row(in, 7, [&](const std::vector<std::string>& f, std::size_t n) {
    GateRow r;
    r.utterance = parse_number<std::size_t>(f[0], n);
    r.stage = stage_from_string(f[1]);
    r.layer = parse_number<std::size_t>(f[2], n);
    r.kind = module_kind_from_string(f[3]);
    r.position = parse_number<std::size_t>(f[4], n);
    r.probability = parse_number<double>(f[5], n);
    const int d = parse_number<int>(f[6], n);
    if (d != 0 && d != 1) throw FormatError("line " + std::to_string(n) + ": decision must be 0 or 1");
    if (!(r.probability >= 0.0 && r.probability <= 1.0)) {
      throw FormatError("line " + std::to_string(n) + ": probability outside [0, 1]");
    }
    r.decision = static_cast<std::uint8_t>(d);
    dump.rows.push_back(r);
  });
  return dump;
}

void write_gate_dump(const std::filesystem::path& path, const GateDump& dump) {
  auto out = open_out(path);
  write_gate_dump(out, dump);
}

GateDump read_gate_dump(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_gate_dump(in);
}

void write_label_dump(std::ostream& out, const std::vector<LabelRow>& rows) {
  out << "# ctxprune-labels v1\n" << kLabelHeader << '\n';
  for (const auto& r : rows) {
    out << r.utterance << ',' << r.position << ',' << int(r.label) << ',' << format_double(r.energy) << '\n';
  }
}

std::vector<LabelRow> read_label_dump(std::istream& in) {
  read_preamble(in, "ctxprune-labels", kLabelHeader);
  std::vector<LabelRow> rows;
  for_each_row(in, 4, [&](const std::vector<std::string>& f, std::size_t n) {
    rows.push_back({parse_number<std::size_t>(f[0], n), parse_number<std::size_t>(f[1], n),
                    static_cast<std::uint8_t>(parse_number<int>(f[2], n) != 0), parse_number<double>(f[3], n)});
  });
  return rows;
}

void write_label_dump(const std::filesystem::path& path, const std::vector<LabelRow>& rows) {
  auto out = open_out(path);
  write_label_dump(out, rows);
}

std::vector<LabelRow> read_label_dump(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_label_dump(in);
}

void write_token_dump(std::ostream& out, const std::vector<TokenRow>& rows) {
  out << "# ctxprune-tokens v1\n" << kTokenHeader << '\n';
  for (const auto& r : rows) {
    out << r.utterance << ',' << r.position << ',' << r.token_id << ",\"" << r.surface << "\"," << int(r.starts_word)
        << '\n';
  }
}

std::vector<TokenRow> read_token_dump(std::istream& in) {
  read_preamble(in, "ctxprune-tokens", kTokenHeader);
  std::vector<TokenRow> rows;
  for_each_row(in, 5, [&](const std::vector<std::string>& f, std::size_t n) {
    rows.push_back({parse_number<std::size_t>(f[0], n), parse_number<std::size_t>(f[1], n), parse_number<int>(f[2], n),
                    f[3], parse_number<int>(f[4], n) != 0});
  });
  return rows;
}

void write_token_dump(const std::filesystem::path& path, const std::vector<TokenRow>& rows) {
  auto out = open_out(path);
  write_token_dump(out, rows);
}

std::vector<TokenRow> read_token_dump(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_token_dump(in);
}

}  // namespace ctxprune
