// SPDX-License-Identifier: Apache-2.0
#include "shadowspec/policy.hpp"

#include <array>
#include <cstdio>
#include <sstream>

namespace shadowspec {

namespace {
constexpr std::array<const char*, 7> kClassNames{
    "User-MDS", "User-Cache", "User-Port", "Massage-MDS", "Massage-Cache", "Massage-Port",
    "SF-OOB"};
}

const char* gadget_class_name(GadgetClass c) { return kClassNames[static_cast<size_t>(c)]; }

std::optional<GadgetClass> gadget_class_from_name(const std::string& s) {
  for (size_t i = 0; i < kClassNames.size(); ++i)
    if (s == kClassNames[i]) return static_cast<GadgetClass>(i);
  return std::nullopt;
}

LoadSinkResult kasper_on_load(const LoadSinkInput& in) {
  LoadSinkResult out;
  out.value_tag = in.value_tag;
  if (in.oob && in.massage_enabled) out.value_tag |= tag::kMassage;
  if ((in.addr_tag & tag::kUser) && in.oob) {
    out.value_tag |= tag::kSecretUser;
    out.user_mds = true;
  }
  if ((in.addr_tag & tag::kMassage) && in.massage_enabled && !(in.addr_tag & tag::kSecretMask)) {
    out.value_tag |= tag::kSecretMassage;
    out.massage_mds = true;
  }
  return out;
}

AddrUseResult kasper_on_addr_use(TagSet addr_tag) {
  return AddrUseResult{(addr_tag & tag::kSecretUser) != 0, (addr_tag & tag::kSecretMassage) != 0};
}

BranchSinkResult kasper_on_branch(TagSet flags_tag) {
  return BranchSinkResult{(flags_tag & tag::kSecretUser) != 0,
                          (flags_tag & tag::kSecretMassage) != 0};
}

void ReportStore::add(const GadgetReport& r) {
  auto [it, inserted] = records_.emplace(key_of(r), r);
  if (!inserted) it->second.count += r.count;
}

void ReportStore::merge(const ReportStore& other) {
  for (const auto& [k, r] : other.records_) add(r);
}

std::vector<GadgetReport> ReportStore::sorted() const {
  std::vector<GadgetReport> out;
  out.reserve(records_.size());
  for (const auto& [k, r] : records_) out.push_back(r);
  return out;
}

bool ReportStore::has_class(GadgetClass c) const {
  for (const auto& [k, r] : records_)
    if (k.cls == c) return true;
  return false;
}

namespace {

std::string chain_str(const std::vector<int>& chain) {
  std::string s;
  for (size_t i = 0; i < chain.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(chain[i]);
  }
  return s.empty() ? "-" : s;
}

std::vector<int> parse_chain(const std::string& s) {
  std::vector<int> out;
  if (s == "-") return out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

}  // namespace

std::string ReportStore::to_text(Policy policy) const {
  std::string out = "shadowspec-report v1\n";
  out += std::string("policy ") + policy_name(policy) + "\n";
  out += "records " + std::to_string(records_.size()) + "\n";
  char buf[256];
  for (const auto& [k, r] : records_) {
    std::snprintf(buf, sizeof(buf),
                  "record class=%s site=%s:%d pc=%s chain=%s count=%u "
                  "first_input=%016llx addr=0x%08x width=%u depth=%d\n",
                  gadget_class_name(r.cls), r.site.block.c_str(), r.site.ordinal,
                  r.symbol.empty() ? "?" : r.symbol.c_str(), chain_str(r.chain).c_str(), r.count,
                  static_cast<unsigned long long>(r.input_hash), r.access_addr, r.access_width,
                  r.depth);
    out += buf;
  }
  return out;
}

std::vector<GadgetReport> ReportStore::parse_text(const std::string& text) {
  std::vector<GadgetReport> out;
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line.rfind("shadowspec-report", 0) != 0)
    throw std::runtime_error("not a shadowspec report file");
  while (std::getline(is, line)) {
    if (line.rfind("record ", 0) != 0) continue;
    GadgetReport r;
    std::istringstream ls(line.substr(7));
    std::string tok;
    while (ls >> tok) {
      size_t eq = tok.find('=');
      if (eq == std::string::npos) continue;
      std::string key = tok.substr(0, eq);
      std::string val = tok.substr(eq + 1);
      if (key == "class") {
        auto c = gadget_class_from_name(val);
        if (!c) throw std::runtime_error("bad gadget class " + val);
        r.cls = *c;
      } else if (key == "site") {
        size_t colon = val.rfind(':');
        r.site.block = val.substr(0, colon);
        r.site.ordinal = std::stoi(val.substr(colon + 1));
      } else if (key == "pc") {
        r.symbol = val;
      } else if (key == "chain") {
        r.chain = parse_chain(val);
      } else if (key == "count") {
        r.count = static_cast<uint32_t>(std::stoul(val));
      } else if (key == "first_input") {
        r.input_hash = std::stoull(val, nullptr, 16);
      } else if (key == "addr") {
        r.access_addr = static_cast<uint32_t>(std::stoul(val, nullptr, 16));
      } else if (key == "width") {
        r.access_width = static_cast<uint8_t>(std::stoul(val));
      } else if (key == "depth") {
        r.depth = std::stoi(val);
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace shadowspec
