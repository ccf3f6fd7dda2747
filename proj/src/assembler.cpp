// SPDX-License-Identifier: Apache-2.0
#include "shadowspec/assembler.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <sstream>

namespace shadowspec {

namespace {

bool is_label_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool is_label_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '$' || c == '.';
}

std::string strip(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

int64_t parse_int(const std::string& s, int line) {
  std::string t = s;
  bool neg = false;
  if (!t.empty() && (t[0] == '-' || t[0] == '+')) {
    neg = t[0] == '-';
    t = t.substr(1);
  }
  int base = 10;
  if (t.rfind("0x", 0) == 0 || t.rfind("0X", 0) == 0) {
    base = 16;
    t = t.substr(2);
  }
  int64_t v = 0;
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v, base);
  if (ec != std::errc() || p != t.data() + t.size())
    throw AssemblyError(line, "malformed integer '" + s + "'");
  return neg ? -v : v;
}

struct OperandParser {
  int line;

  Operand parse(const std::string& raw) const {
    std::string s = strip(raw);
    if (s.empty()) throw AssemblyError(line, "empty operand");
    if (s[0] == '#') {
      int64_t v = parse_int(s.substr(1), line);
      if (v < INT32_MIN || v > static_cast<int64_t>(UINT32_MAX))
        throw AssemblyError(line, "immediate out of range: " + s);
      return Operand::make_imm(static_cast<int32_t>(v));
    }
    if (s[0] == '[') {
      if (s.back() != ']') throw AssemblyError(line, "malformed memory operand: " + s);
      std::string inner = strip(s.substr(1, s.size() - 2));
      size_t pos = inner.find_first_of("+-", 1);
      std::string base = pos == std::string::npos ? inner : strip(inner.substr(0, pos));
      int32_t disp = 0;
      if (pos != std::string::npos) {
        std::string d = strip(inner.substr(pos));
        disp = static_cast<int32_t>(parse_int(d, line));
      }
      int reg = parse_reg(base);
      return Operand::make_mem(reg, disp);
    }
    if ((s[0] == 'r' || s[0] == 'R') && s.size() <= 3 &&
        std::all_of(s.begin() + 1, s.end(),
                    [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
      return Operand::make_reg(parse_reg(s));
    }
    if (!is_label_start(s[0]) || !std::all_of(s.begin(), s.end(), is_label_char))
      throw AssemblyError(line, "malformed operand: " + s);
    return Operand::make_label(s);
  }

  int parse_reg(const std::string& s) const {
    if (s.size() < 2 || (s[0] != 'r' && s[0] != 'R'))
      throw AssemblyError(line, "expected register, got '" + s + "'");
    int64_t v = parse_int(s.substr(1), line);
    if (v < 0 || v >= kNumRegs) throw AssemblyError(line, "register out of range: " + s);
    return static_cast<int>(v);
  }
};

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  int depth = 0;
  for (char c : s) {
    if (c == '[') depth++;
    if (c == ']') depth--;
    if (c == ',' && depth == 0) {
      out.push_back(strip(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!strip(cur).empty()) out.push_back(strip(cur));
  return out;
}

void expect_kinds(const Instruction& in, std::initializer_list<OperandKind> kinds, int line) {
  if (in.ops.size() != kinds.size())
    throw AssemblyError(line, std::string(opcode_name(in.op)) + ": wrong operand count");
  size_t i = 0;
  for (OperandKind k : kinds) {
    if (in.ops[i].kind != k) throw AssemblyError(line, std::string(opcode_name(in.op)) +
                                                           ": bad operand " + std::to_string(i + 1));
    ++i;
  }
}

struct AsmState {
  Program prog;
  Function* fn = nullptr;
  BasicBlock* block = nullptr;
  int auto_label = 0;
  std::vector<std::pair<std::string, int>> label_refs;  // label -> line, resolved at the end
  std::vector<std::pair<std::string, int>> code_refs;   // must name a block/function
  std::vector<std::pair<std::string, int>> call_refs;   // must name a function/extern
  std::vector<std::string> defined;

  void define_label(const std::string& name, int line) {
    for (const auto& d : defined)
      if (d == name) throw AssemblyError(line, "duplicate label '" + name + "'");
    defined.push_back(name);
  }

  BasicBlock* open_block(const std::string& label, int line) {
    close_block();
    define_label(label, line);
    fn->blocks.push_back(BasicBlock{});
    block = &fn->blocks.back();
    block->label = label;
    block->copy = CopyKind::real;
    return block;
  }

  void close_block() {
    if (block && block->insns.empty()) {
      Instruction nop;
      nop.op = Opcode::nop;
      block->insns.push_back(nop);
    }
    if (block) block->term = block_term(*block);
    block = nullptr;
  }

  static TermKind block_term(const BasicBlock& b) {
    if (b.insns.empty()) return TermKind::fallthrough;
    return terminator_kind(b.insns.back().op);
  }
};

}  // namespace

Program assemble(const std::string& source) {
  AsmState st;
  st.prog.entry = "main";

  std::istringstream is(source);
  std::string raw;
  int line = 0;
  bool saw_entry = false;

  while (std::getline(is, raw)) {
    ++line;
    size_t comment = raw.find(';');
    if (comment != std::string::npos) raw = raw.substr(0, comment);
    std::string text = strip(raw);
    if (text.empty()) continue;

    if (text[0] == '.') {
      auto toks = split_ws(text);
      const std::string& dir = toks[0];
      if (dir == ".entry") {
        if (toks.size() != 2) throw AssemblyError(line, ".entry NAME");
        st.prog.entry = toks[1];
        saw_entry = true;
      } else if (dir == ".func") {
        if (st.fn) throw AssemblyError(line, "nested .func");
        if (toks.size() != 2) throw AssemblyError(line, ".func NAME");
        st.prog.functions.push_back(Function{});
        st.fn = &st.prog.functions.back();
        st.fn->name = toks[1];
        st.auto_label = 0;
      } else if (dir == ".endfunc") {
        if (!st.fn) throw AssemblyError(line, ".endfunc without .func");
        st.close_block();
        if (st.fn->blocks.empty()) throw AssemblyError(line, "function '" + st.fn->name + "' is empty");
        if (st.fn->blocks.back().term == TermKind::fallthrough)
          throw AssemblyError(line, "function '" + st.fn->name + "' falls through its end");
        if (st.fn->blocks.front().label != st.fn->name) st.define_label(st.fn->name, line);
        st.fn = nullptr;
      } else if (dir == ".data") {
        if (st.fn) throw AssemblyError(line, ".data inside .func");
        if (toks.size() < 3) throw AssemblyError(line, ".data NAME SIZE [init...]");
        DataSegment d;
        d.name = toks[1];
        int64_t size = parse_int(toks[2], line);
        if (size <= 0 || size > 1 << 20) throw AssemblyError(line, "bad data size");
        d.size = static_cast<uint32_t>(size);
        for (size_t i = 3; i < toks.size(); ++i) {
          if (toks[i][0] == '&') {
            std::string lbl = toks[i].substr(1);
            st.label_refs.emplace_back(lbl, line);
            d.label_words.emplace_back(static_cast<uint32_t>(d.bytes.size()), lbl);
            for (int k = 0; k < 4; ++k) d.bytes.push_back(0);
          } else {
            int64_t v = parse_int(toks[i], line);
            if (v < 0 || v > 255) throw AssemblyError(line, "data byte out of range");
            d.bytes.push_back(static_cast<uint8_t>(v));
          }
        }
        if (d.bytes.size() > d.size) throw AssemblyError(line, "initializer longer than size");
        st.define_label(d.name, line);
        st.prog.data.push_back(std::move(d));
      } else if (dir == ".extern") {
        if (toks.size() != 2 && toks.size() != 3) throw AssemblyError(line, ".extern NAME [BUILTIN]");
        ExternDecl e;
        e.name = toks[1];
        e.binding = toks.size() == 3 ? toks[2] : toks[1];
        if (!is_builtin_external(e.binding))
          throw AssemblyError(line, "extern binds to unknown external '" + e.binding + "'");
        st.define_label(e.name, line);
        st.prog.externs.push_back(std::move(e));
      } else {
        throw AssemblyError(line, "unknown directive " + dir);
      }
      continue;
    }

    if (!st.fn) throw AssemblyError(line, "instruction outside .func");

    // Labels, possibly followed by an instruction on the same line.
    while (true) {
      size_t colon = text.find(':');
      if (colon == std::string::npos) break;
      std::string head = strip(text.substr(0, colon));
      if (head.empty() || !is_label_start(head[0]) ||
          !std::all_of(head.begin(), head.end(), is_label_char))
        break;  // not a label; let operand parsing report errors
      st.open_block(head, line);
      text = strip(text.substr(colon + 1));
      if (text.empty()) break;
    }
    if (text.empty()) continue;

    if (!st.block) {
      std::string lbl = st.fn->blocks.empty()
                            ? st.fn->name
                            : st.fn->name + "$b" + std::to_string(st.auto_label++);
      st.open_block(lbl, line);
    }

    // Mnemonic and operands.
    Origin origin = Origin::original;
    if (text[0] == '@') {
      origin = Origin::instrumentation;
      text = text.substr(1);
    }
    size_t sp = text.find_first_of(" \t");
    std::string mnem = sp == std::string::npos ? text : text.substr(0, sp);
    std::string rest = sp == std::string::npos ? "" : strip(text.substr(sp));

    Instruction in;
    in.origin = origin;
    in.line = line;

    uint8_t width = 4;
    if (mnem.size() > 2 && mnem.rfind(".b") == mnem.size() - 2) {
      width = 1;
      mnem = mnem.substr(0, mnem.size() - 2);
    }

    OperandParser op{line};
    for (const auto& o : split_commas(rest)) in.ops.push_back(op.parse(o));

    if (mnem.size() > 1 && mnem[0] == 'j') {
      if (auto c = cond_from_name(mnem.substr(1)); c && mnem != "jmp" && mnem != "jmpr") {
        in.op = Opcode::jcc;
        in.cond = *c;
        expect_kinds(in, {OperandKind::label}, line);
        st.code_refs.emplace_back(in.ops[0].label, line);
        st.block->insns.push_back(in);
        st.close_block();
        continue;
      }
    }

    auto opc = opcode_from_name(mnem);
    if (!opc) {
      auto intr = intrinsic_from_name(mnem);
      if (!intr || origin != Origin::instrumentation)
        throw AssemblyError(line, "unknown mnemonic '" + mnem + "'");
      in.op = Opcode::intrinsic;
      in.intr = *intr;
      in.width = width;
      for (const auto& o : in.ops)
        if (o.kind == OperandKind::label) st.label_refs.emplace_back(o.label, line);
      st.block->insns.push_back(in);
      continue;
    }

    in.op = *opc;
    in.width = width;
    switch (in.op) {
      case Opcode::mov:
        if (in.ops.size() != 2 || in.ops[0].kind != OperandKind::reg ||
            (in.ops[1].kind == OperandKind::mem))
          throw AssemblyError(line, "mov rd, (reg|#imm|label)");
        if (in.ops[1].kind == OperandKind::label) st.label_refs.emplace_back(in.ops[1].label, line);
        break;
      case Opcode::add:
      case Opcode::sub:
      case Opcode::and_:
      case Opcode::or_:
      case Opcode::xor_:
      case Opcode::shl:
      case Opcode::shr:
        if (in.ops.size() != 2 || in.ops[0].kind != OperandKind::reg ||
            (in.ops[1].kind != OperandKind::reg && in.ops[1].kind != OperandKind::imm))
          throw AssemblyError(line, std::string(opcode_name(in.op)) + " rd, (reg|#imm)");
        break;
      case Opcode::cmp:
        if (in.ops.size() != 2 || in.ops[0].kind != OperandKind::reg ||
            (in.ops[1].kind != OperandKind::reg && in.ops[1].kind != OperandKind::imm))
          throw AssemblyError(line, "cmp ra, (reg|#imm)");
        break;
      case Opcode::load:
        expect_kinds(in, {OperandKind::reg, OperandKind::mem}, line);
        break;
      case Opcode::store:
        expect_kinds(in, {OperandKind::reg, OperandKind::mem}, line);
        break;
      case Opcode::jmp:
      case Opcode::call:
        expect_kinds(in, {OperandKind::label}, line);
        if (in.op == Opcode::call)
          st.call_refs.emplace_back(in.ops[0].label, line);
        else
          st.code_refs.emplace_back(in.ops[0].label, line);
        break;
      case Opcode::jmpr:
      case Opcode::callr:
      case Opcode::push:
      case Opcode::pop:
        expect_kinds(in, {OperandKind::reg}, line);
        break;
      case Opcode::ret:
      case Opcode::fence:
      case Opcode::nop:
      case Opcode::halt:
        expect_kinds(in, {}, line);
        break;
      case Opcode::marker_nop:
        if (origin == Origin::original)
          throw AssemblyError(line, "marker_nop is a reserved encoding");
        expect_kinds(in, {}, line);
        break;
      case Opcode::ext: {
        auto toks = split_ws(rest);
        if (toks.size() != 1) throw AssemblyError(line, "ext NAME");
        in.ops.clear();
        in.ext_name = toks[0];
        if (!is_builtin_external(in.ext_name))
          throw AssemblyError(line, "unknown external name '" + in.ext_name + "'");
        break;
      }
      case Opcode::jcc:
      case Opcode::intrinsic:
        throw AssemblyError(line, "unknown mnemonic '" + mnem + "'");
    }

    st.block->insns.push_back(in);
    if (is_terminator(in.op)) st.close_block();
  }

  if (st.fn) throw AssemblyError(line, "missing .endfunc");
  (void)saw_entry;

  // Resolve references.
  auto is_defined = [&](const std::string& name) {
    return std::find(st.defined.begin(), st.defined.end(), name) != st.defined.end();
  };
  for (const auto& [name, ln] : st.label_refs)
    if (!is_defined(name)) throw AssemblyError(ln, "undefined label '" + name + "'");
  for (const auto& [name, ln] : st.code_refs) {
    if (!is_defined(name)) throw AssemblyError(ln, "undefined label '" + name + "'");
    if (!st.prog.find_block(name) && !st.prog.find_function(name))
      throw AssemblyError(ln, "jump target '" + name + "' is not code");
  }
  for (const auto& [name, ln] : st.call_refs) {
    if (!is_defined(name)) throw AssemblyError(ln, "undefined label '" + name + "'");
    bool is_fn = st.prog.find_function(name) != nullptr;
    bool is_ext = std::any_of(st.prog.externs.begin(), st.prog.externs.end(),
                              [&](const ExternDecl& e) { return e.name == name; });
    if (!is_fn && !is_ext)
      throw AssemblyError(ln, "call target '" + name + "' is not a function");
  }

  st.prog.stamp_sites();
  try {
    st.prog.finalize();
  } catch (const std::runtime_error& e) {
    throw AssemblyError(0, e.what());
  }
  return st.prog;
}

std::string format_operand(const Operand& op) {
  char buf[48];
  switch (op.kind) {
    case OperandKind::reg:
      std::snprintf(buf, sizeof(buf), "r%d", op.reg);
      return buf;
    case OperandKind::imm:
      std::snprintf(buf, sizeof(buf), "#%d", op.imm);
      return buf;
    case OperandKind::label:
      return op.label;
    case OperandKind::mem:
      if (op.imm < 0)
        std::snprintf(buf, sizeof(buf), "[r%d%d]", op.reg, op.imm);
      else
        std::snprintf(buf, sizeof(buf), "[r%d+%d]", op.reg, op.imm);
      return buf;
  }
  return "?";
}

std::string format_instruction(const Instruction& in) {
  std::string out;
  if (in.origin == Origin::instrumentation) out += "@";
  if (in.op == Opcode::intrinsic) {
    out += intrinsic_name(in.intr);
  } else if (in.op == Opcode::jcc) {
    out += "j";
    out += cond_name(in.cond);
  } else {
    out += opcode_name(in.op);
  }
  bool mem_op = in.op == Opcode::load || in.op == Opcode::store ||
                (in.op == Opcode::intrinsic &&
                 (in.intr == IntrinsicKind::mem_log || in.intr == IntrinsicKind::asan_check ||
                  in.intr == IntrinsicKind::taint_load || in.intr == IntrinsicKind::tag_store ||
                  in.intr == IntrinsicKind::tag_clear));
  if (mem_op && in.width == 1) out += ".b";
  if (in.op == Opcode::ext) {
    out += " " + in.ext_name;
    return out;
  }
  for (size_t i = 0; i < in.ops.size(); ++i) {
    out += i == 0 ? " " : ", ";
    out += format_operand(in.ops[i]);
  }
  return out;
}

std::string disassemble(const Program& program) {
  std::string out;
  out += ".entry " + program.entry + "\n";
  for (const auto& e : program.externs) out += ".extern " + e.name + " " + e.binding + "\n";
  for (const auto& d : program.data) {
    out += ".data " + d.name + " " + std::to_string(d.size);
    size_t i = 0;
    while (i < d.bytes.size()) {
      bool lbl = false;
      for (const auto& [off, name] : d.label_words) {
        if (off == i) {
          out += " &" + name;
          i += 4;
          lbl = true;
          break;
        }
      }
      if (!lbl) {
        out += " " + std::to_string(d.bytes[i]);
        ++i;
      }
    }
    out += "\n";
  }
  for (const auto& fn : program.functions) {
    out += ".func " + fn.name + "\n";
    for (const auto& b : fn.blocks) {
      out += b.label + ":\n";
      for (const auto& in : b.insns) out += "  " + format_instruction(in) + "\n";
    }
    out += ".endfunc\n";
  }
  return out;
}

}  // namespace shadowspec
