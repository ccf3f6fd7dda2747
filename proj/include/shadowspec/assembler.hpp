// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "shadowspec/isa.hpp"

namespace shadowspec {

// Parses assembly text into a finalized Program. All instructions are tagged
// `original` unless written with the `@` prefix. Throws AssemblyError with a
// line number on duplicate labels, undefined labels and malformed operands.
Program assemble(const std::string& source);

// Renders a Program back to assembly text. assemble(disassemble(p)) is
// structurally equal to p (opcodes, operands, origins, labels, data).
std::string disassemble(const Program& program);

std::string format_instruction(const Instruction& insn);
std::string format_operand(const Operand& op);

}  // namespace shadowspec
