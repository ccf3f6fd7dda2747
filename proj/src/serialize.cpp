// SPDX-License-Identifier: Apache-2.0
#include "shadowspec/serialize.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "shadowspec/assembler.hpp"

namespace shadowspec {

using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

json operand_to_json(const Operand& o) {
  switch (o.kind) {
    case OperandKind::reg: return json::array({"r", o.reg});
    case OperandKind::imm: return json::array({"i", o.imm});
    case OperandKind::label: return json::array({"l", o.label});
    case OperandKind::mem: return json::array({"m", o.reg, o.imm});
  }
  return {};
}

Operand operand_from_json(const json& j) {
  std::string k = j.at(0);
  if (k == "r") return Operand::make_reg(j.at(1).get<int>());
  if (k == "i") return Operand::make_imm(j.at(1).get<int32_t>());
  if (k == "l") return Operand::make_label(j.at(1).get<std::string>());
  if (k == "m") return Operand::make_mem(j.at(1).get<int>(), j.at(2).get<int32_t>());
  throw std::runtime_error("bad operand kind in program file");
}

json insn_to_json(const Instruction& in) {
  json j;
  j["op"] = opcode_name(in.op);
  if (in.op == Opcode::jcc) j["cond"] = cond_name(in.cond);
  if (in.op == Opcode::intrinsic) j["intr"] = intrinsic_name(in.intr);
  if (in.op == Opcode::ext) j["ext"] = in.ext_name;
  if (in.width != 4) j["w"] = in.width;
  if (in.origin == Origin::instrumentation) j["instr"] = true;
  if (!in.ops.empty()) {
    json ops = json::array();
    for (const auto& o : in.ops) ops.push_back(operand_to_json(o));
    j["ops"] = ops;
  }
  if (in.site.valid()) j["site"] = json::array({in.site.block, in.site.ordinal});
  return j;
}

Instruction insn_from_json(const json& j) {
  Instruction in;
  auto op = opcode_from_name(j.at("op").get<std::string>());
  if (!op) throw std::runtime_error("bad opcode in program file");
  in.op = *op;
  if (j.contains("cond")) {
    auto c = cond_from_name(j["cond"].get<std::string>());
    if (!c) throw std::runtime_error("bad condition in program file");
    in.cond = *c;
  }
  if (j.contains("intr")) {
    auto k = intrinsic_from_name(j["intr"].get<std::string>());
    if (!k) throw std::runtime_error("bad intrinsic in program file");
    in.intr = *k;
  }
  if (j.contains("ext")) in.ext_name = j["ext"].get<std::string>();
  if (j.contains("w")) in.width = j["w"].get<uint8_t>();
  if (j.contains("instr") && j["instr"].get<bool>()) in.origin = Origin::instrumentation;
  if (j.contains("ops"))
    for (const auto& o : j["ops"]) in.ops.push_back(operand_from_json(o));
  if (j.contains("site")) in.site = SiteRef{j["site"].at(0), j["site"].at(1)};
  return in;
}

}  // namespace

std::string program_to_json(const Program& program) {
  json j;
  j["format"] = "shadowspec-program";
  j["version"] = kFormatVersion;
  j["entry"] = program.entry;

  const ProgramMeta& m = program.meta;
  j["meta"] = {{"mode", mode_name(m.mode)},
               {"policy", policy_name(m.policy)},
               {"nesting", m.nesting},
               {"rob_budget", m.rob_budget},
               {"check_interval", m.check_interval},
               {"max_nest_depth", m.max_nest_depth},
               {"full_depth_runs", m.full_depth_runs},
               {"harness_mode", m.harness_mode},
               {"user_global", m.user_global},
               {"user_global_bytes", m.user_global_bytes},
               {"num_branches", m.num_branches},
               {"num_spec_guards", m.num_spec_guards}};

  j["externs"] = json::array();
  for (const auto& e : program.externs)
    j["externs"].push_back({{"name", e.name}, {"binding", e.binding}});

  j["data"] = json::array();
  for (const auto& d : program.data) {
    json dj = {{"name", d.name}, {"size", d.size}, {"bytes", d.bytes}};
    json lw = json::array();
    for (const auto& [off, lbl] : d.label_words) lw.push_back(json::array({off, lbl}));
    dj["label_words"] = lw;
    j["data"].push_back(dj);
  }

  j["functions"] = json::array();
  for (const auto& fn : program.functions) {
    json fj = {{"name", fn.name}, {"shadow", fn.copy == CopyKind::shadow}};
    json blocks = json::array();
    for (const auto& b : fn.blocks) {
      json bj = {{"label", b.label}, {"shadow", b.copy == CopyKind::shadow}};
      if (b.is_trampoline) bj["trampoline"] = true;
      if (b.indirect_target) bj["indirect_target"] = true;
      if (b.marked) bj["marked"] = true;
      json insns = json::array();
      for (const auto& in : b.insns) insns.push_back(insn_to_json(in));
      bj["insns"] = insns;
      blocks.push_back(bj);
    }
    fj["blocks"] = blocks;
    j["functions"].push_back(fj);
  }

  j["branches"] = json::array();
  for (const auto& br : program.branches) {
    j["branches"].push_back({{"id", br.id},
                             {"site", json::array({br.site.block, br.site.ordinal})},
                             {"function", br.function},
                             {"cond", cond_name(br.cond)},
                             {"taken", br.taken_label},
                             {"fall", br.fall_label},
                             {"tramp", br.tramp_label}});
  }
  return j.dump(1);
}

Program program_from_json(const std::string& text) {
  json j = json::parse(text);
  if (j.value("format", "") != "shadowspec-program")
    throw std::runtime_error("not a shadowspec program file");
  if (j.value("version", 0) != kFormatVersion)
    throw std::runtime_error("unsupported program file version");

  Program p;
  p.entry = j.value("entry", "main");
  const json& m = j.at("meta");
  p.meta.mode = mode_from_name(m.value("mode", "none")).value_or(InstrMode::none);
  p.meta.policy = policy_from_name(m.value("policy", "kasper")).value_or(Policy::kasper);
  p.meta.nesting = m.value("nesting", true);
  p.meta.rob_budget = m.value("rob_budget", 250);
  p.meta.check_interval = m.value("check_interval", 50);
  p.meta.max_nest_depth = m.value("max_nest_depth", 6);
  p.meta.full_depth_runs = m.value("full_depth_runs", 5);
  p.meta.harness_mode = m.value("harness_mode", false);
  p.meta.user_global = m.value("user_global", "");
  p.meta.user_global_bytes = m.value("user_global_bytes", 0u);
  p.meta.num_branches = m.value("num_branches", 0);
  p.meta.num_spec_guards = m.value("num_spec_guards", 0);

  for (const auto& e : j.value("externs", json::array())) {
    ExternDecl d;
    d.name = e.at("name");
    d.binding = e.at("binding");
    if (!is_builtin_external(d.binding))
      throw std::runtime_error("extern binds to unknown external: " + d.binding);
    p.externs.push_back(d);
  }

  for (const auto& dj : j.value("data", json::array())) {
    DataSegment d;
    d.name = dj.at("name");
    d.size = dj.at("size");
    d.bytes = dj.at("bytes").get<std::vector<uint8_t>>();
    for (const auto& lw : dj.value("label_words", json::array()))
      d.label_words.emplace_back(lw.at(0).get<uint32_t>(), lw.at(1).get<std::string>());
    p.data.push_back(std::move(d));
  }

  for (const auto& fj : j.at("functions")) {
    Function fn;
    fn.name = fj.at("name");
    fn.copy = fj.value("shadow", false) ? CopyKind::shadow : CopyKind::real;
    for (const auto& bj : fj.at("blocks")) {
      BasicBlock b;
      b.label = bj.at("label");
      b.copy = bj.value("shadow", false) ? CopyKind::shadow : CopyKind::real;
      b.is_trampoline = bj.value("trampoline", false);
      b.indirect_target = bj.value("indirect_target", false);
      b.marked = bj.value("marked", false);
      for (const auto& ij : bj.at("insns")) {
        Instruction in = insn_from_json(ij);
        if (in.op == Opcode::ext && !is_builtin_external(in.ext_name))
          throw std::runtime_error("unknown external name: " + in.ext_name);
        b.insns.push_back(std::move(in));
      }
      b.term = b.insns.empty() ? TermKind::fallthrough : terminator_kind(b.insns.back().op);
      fn.blocks.push_back(std::move(b));
    }
    p.functions.push_back(std::move(fn));
  }

  for (const auto& bj : j.value("branches", json::array())) {
    BranchInfo br;
    br.id = bj.at("id");
    br.site = SiteRef{bj.at("site").at(0), bj.at("site").at(1)};
    br.function = bj.at("function");
    br.cond = cond_from_name(bj.at("cond").get<std::string>()).value_or(Cond::z);
    br.taken_label = bj.at("taken");
    br.fall_label = bj.at("fall");
    br.tramp_label = bj.at("tramp");
    p.branches.push_back(std::move(br));
  }

  p.finalize();
  return p;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << content;
}

Program load_program_file(const std::string& path) {
  std::string text = read_file(path);
  size_t i = text.find_first_not_of(" \t\r\n");
  if (i != std::string::npos && text[i] == '{') return program_from_json(text);
  return assemble(text);
}

void save_program_file(const Program& program, const std::string& path) {
  write_file(path, program_to_json(program));
}

}  // namespace shadowspec
