// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "shadowspec/isa.hpp"

namespace shadowspec {

// Versioned, self-describing program file (JSON). This is the format the
// pipeline stages exchange; it preserves everything including origin tags,
// copy identities, site provenance and the branch table.
std::string program_to_json(const Program& program);
Program program_from_json(const std::string& text);

// Loads a program from a file: JSON program files and `.s` assembly sources
// are both accepted (detected by content).
Program load_program_file(const std::string& path);
void save_program_file(const Program& program, const std::string& path);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

}  // namespace shadowspec
