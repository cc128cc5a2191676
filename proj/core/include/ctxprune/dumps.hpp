#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "ctxprune/gates.hpp"

namespace ctxprune {

// Text dumps consumed by the analyses. Each file starts with a versioned
// comment line, then a CSV header row:
//
//   # ctxprune-gates v1 mode=<mode> context=<config>
//   utterance,stage,layer,module_kind,position,probability,decision
//
//   # ctxprune-labels v1
//   utterance,position,label,energy
//
//   # ctxprune-tokens v1
//   utterance,position,token_id,surface,starts_word
//
// Utterance-level gates are written once per position. Token surfaces are
// double-quoted so leading spaces survive.

struct GateRow {
  std::size_t utterance = 0;
  Stage stage = Stage::Encoder;
  std::size_t layer = 0;
  ModuleKind kind = ModuleKind::EncSelfAttn;
  std::size_t position = 0;
  double probability = 0.0;
  std::uint8_t decision = 0;
};

struct GateDump {
  std::string mode = "temporal";
  std::string context;
  std::vector<GateRow> rows;

  void append(const GateSet& gates, std::size_t utterance);
};

struct LabelRow {
  std::size_t utterance = 0;
  std::size_t position = 0;
  std::uint8_t label = 0;
  double energy = 0.0;
};

struct TokenRow {
  std::size_t utterance = 0;
  std::size_t position = 0;
  int token_id = 0;
  std::string surface;
  bool starts_word = false;
};

void write_gate_dump(std::ostream& out, const GateDump& dump);
GateDump read_gate_dump(std::istream& in);
void write_gate_dump(const std::filesystem::path& path, const GateDump& dump);
GateDump read_gate_dump(const std::filesystem::path& path);

void write_label_dump(std::ostream& out, const std::vector<LabelRow>& rows);
std::vector<LabelRow> read_label_dump(std::istream& in);
void write_label_dump(const std::filesystem::path& path, const std::vector<LabelRow>& rows);
std::vector<LabelRow> read_label_dump(const std::filesystem::path& path);

void write_token_dump(std::ostream& out, const std::vector<TokenRow>& rows);
std::vector<TokenRow> read_token_dump(std::istream& in);
void write_token_dump(const std::filesystem::path& path, const std::vector<TokenRow>& rows);
std::vector<TokenRow> read_token_dump(const std::filesystem::path& path);

/// Rebuilds one GateSet per utterance (sorted by utterance id). Stage lengths
/// are the highest position + 1. With `utterance_level`, each module keeps
/// only its position-0 decision as a single utterance gate.
std::vector<std::pair<std::size_t, GateSet>> to_gate_sets(const GateDump& dump, bool utterance_level);

/// Shortest text that round-trips a double.
std::string format_double(double v);

}  // namespace ctxprune
