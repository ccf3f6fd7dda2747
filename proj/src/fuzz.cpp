// SPDX-License-Identifier: Apache-2.0
#include "shadowspec/fuzz.hpp"

#include <algorithm>
#include <chrono>
#include <map>
#include <thread>

#include "json.hpp"
#include "shadowspec/cfg.hpp"

namespace shadowspec {

namespace {
constexpr size_t kMaxInputLen = 64;
constexpr uint64_t kRoundSize = 32;
}  // namespace

Input mutate(const Input& base, std::mt19937_64& rng, const std::vector<Input>& corpus) {
  Input out = base;
  int ops = 1 + static_cast<int>(rng() % 3);
  for (int k = 0; k < ops; ++k) {
    switch (rng() % 6) {
      case 0:
        if (!out.empty()) {
          size_t bit = rng() % (out.size() * 8);
          out[bit / 8] ^= static_cast<uint8_t>(1u << (bit % 8));
        }
        break;
      case 1:
        if (!out.empty()) out[rng() % out.size()] = static_cast<uint8_t>(rng());
        break;
      case 2:
        if (!out.empty()) {
          int delta = static_cast<int>(rng() % 9) - 4;
          out[rng() % out.size()] += static_cast<uint8_t>(delta);
        }
        break;
      case 3:
        if (out.size() < kMaxInputLen)
          out.insert(out.begin() + rng() % (out.size() + 1), static_cast<uint8_t>(rng()));
        break;
      case 4:
        if (!out.empty()) out.erase(out.begin() + rng() % out.size());
        break;
      case 5:
        if (!corpus.empty()) {
          const Input& other = corpus[rng() % corpus.size()];
          if (!other.empty()) {
            size_t cut_a = out.empty() ? 0 : rng() % (out.size() + 1);
            size_t cut_b = rng() % other.size();
            out.resize(cut_a);
            out.insert(out.end(), other.begin() + cut_b, other.end());
            if (out.size() > kMaxInputLen) out.resize(kMaxInputLen);
          }
        }
        break;
    }
  }
  if (out.empty()) out.push_back(static_cast<uint8_t>(rng()));
  return out;
}

FuzzResult fuzz_loop(const ExecImage& img, const FuzzConfig& cfg, std::vector<Input> seeds,
                     const std::function<void(uint64_t, size_t, size_t)>& progress) {
  FuzzResult res;
  if (seeds.empty()) seeds.push_back({});
  std::vector<Input> corpus = seeds;
  std::vector<CoverageSets> fingerprints(corpus.size());
  std::map<uint32_t, uint64_t> normal_hits;  // rare-branch boosting

  auto start_time = std::chrono::steady_clock::now();
  auto out_of_time = [&] {
    if (!cfg.wall_seconds) return false;
    auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time);
    return dt.count() >= *cfg.wall_seconds;
  };

  while (res.executed < cfg.executions && !out_of_time()) {
    uint64_t round = std::min<uint64_t>(kRoundSize, cfg.executions - res.executed);
    size_t corpus_size = corpus.size();

    // The boost candidate: the retained input whose fingerprint touches the
    // rarest normal-coverage element so far.
    size_t boost_ix = 0;
    uint64_t boost_rarity = UINT64_MAX;
    for (size_t i = 0; i < corpus_size; ++i) {
      for (uint32_t e : fingerprints[i].normal) {
        auto it = normal_hits.find(e);
        uint64_t hits = it == normal_hits.end() ? 0 : it->second;
        if (hits < boost_rarity) {
          boost_rarity = hits;
          boost_ix = i;
        }
      }
    }

    std::vector<Input> jobs(round);
    for (uint64_t j = 0; j < round; ++j) {
      uint64_t ix = res.executed + j;
      if (ix < seeds.size()) {
        jobs[j] = seeds[ix];
        continue;
      }
      std::mt19937_64 rng(cfg.seed ^ fnv1a64(&ix, sizeof(ix)));
      size_t base_ix = (ix % 8 == 7) ? boost_ix : static_cast<size_t>(ix % corpus_size);
      jobs[j] = mutate(corpus[base_ix], rng, corpus);
    }

    std::vector<RunResult> results(round);
    const BranchStatsTable stats_snapshot = res.stats;
    int workers = std::max(1, cfg.workers);
    if (workers == 1 || round == 1) {
      Vm vm(img);
      for (uint64_t j = 0; j < round; ++j)
        results[j] = vm.run(jobs[j], cfg.run, &stats_snapshot);
    } else {
      std::atomic<uint64_t> next{0};
      std::vector<std::thread> pool;
      for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
          Vm vm(img);
          while (true) {
            uint64_t j = next.fetch_add(1);
            if (j >= round) break;
            results[j] = vm.run(jobs[j], cfg.run, &stats_snapshot);
          }
        });
      }
      for (auto& t : pool) t.join();
    }

    // Merge in execution order; retention and stats are order-deterministic.
    for (uint64_t j = 0; j < round; ++j) {
      RunResult& r = results[j];
      bool fresh = false;
      for (uint32_t e : r.coverage.normal) {
        normal_hits[e]++;
        fresh |= res.coverage.normal.insert(e).second;
      }
      for (uint32_t e : r.coverage.spec) fresh |= res.coverage.spec.insert(e).second;
      if (fresh) {
        corpus.push_back(jobs[j]);
        fingerprints.push_back(r.coverage);
      }
      for (const auto& rep : r.reports) res.store.add(rep);
      res.counters.steps += r.counters.steps;
      res.counters.originals += r.counters.originals;
      res.counters.instrumentation += r.counters.instrumentation;
      res.counters.guard_checks += r.counters.guard_checks;
      res.episodes.accumulate(r.episodes);
      res.stats.merge_counts(r.branch_entry_deltas, img.meta().max_nest_depth);
      res.executed++;
    }
    if (progress) progress(res.executed, corpus.size(), res.store.size());
  }

  res.corpus = std::move(corpus);
  return res;
}

// --- Injection -------------------------------------------------------------------

namespace {

constexpr const char* kUserGlobal = "inj_user";

struct TemplateBlocks {
  std::vector<Instruction> entry;        // replaces the site block body
  std::vector<BasicBlock> extra_blocks;  // risky path, skip, ...
};

Instruction ins(Opcode op, std::vector<Operand> ops, uint8_t width = 4) {
  Instruction in;
  in.op = op;
  in.ops = std::move(ops);
  in.width = width;
  return in;
}

Instruction jcc_ins(Cond c, const std::string& target) {
  Instruction in;
  in.op = Opcode::jcc;
  in.cond = c;
  in.ops = {Operand::make_label(target)};
  return in;
}

Instruction ext_ins(const std::string& name) {
  Instruction in;
  in.op = Opcode::ext;
  in.ext_name = name;
  return in;
}

// Shared prologue: r10 = fresh 8-byte heap object, r12 = first user byte.
std::vector<Instruction> template_prologue() {
  return {
      ins(Opcode::push, {Operand::make_reg(0)}),
      ins(Opcode::mov, {Operand::make_reg(0), Operand::make_imm(8)}),
      ext_ins("malloc"),
      ins(Opcode::mov, {Operand::make_reg(10), Operand::make_reg(0)}),
      ins(Opcode::pop, {Operand::make_reg(0)}),
      ins(Opcode::mov, {Operand::make_reg(11), Operand::make_label(kUserGlobal)}),
      ins(Opcode::load, {Operand::make_reg(12), Operand::make_mem(11, 0)}, 1),
      ins(Opcode::cmp, {Operand::make_reg(12), Operand::make_imm(8)}),
  };
}

std::vector<Instruction> secret_load(uint8_t width) {
  return {
      ins(Opcode::mov, {Operand::make_reg(11), Operand::make_reg(10)}),
      ins(Opcode::add, {Operand::make_reg(11), Operand::make_reg(12)}),
      ins(Opcode::load, {Operand::make_reg(13), Operand::make_mem(11, 0)}, width),
  };
}

std::vector<Instruction> transmit_load(uint8_t width) {
  return {
      ins(Opcode::mov, {Operand::make_reg(11), Operand::make_reg(10)}),
      ins(Opcode::add, {Operand::make_reg(11), Operand::make_reg(13)}),
      ins(Opcode::load, {Operand::make_reg(13), Operand::make_mem(11, 0)}, width),
  };
}

TemplateBlocks build_template(int id, const std::string& prefix, const std::string& cont) {
  TemplateBlocks t;
  std::string risky = prefix + "r";
  std::string skip = prefix + "s";
  std::string taken = prefix + "t";

  t.entry = template_prologue();
  t.entry.push_back(jcc_ins(Cond::geu, skip));

  BasicBlock rb;
  rb.label = risky;
  auto add = [&rb](std::vector<Instruction> v) {
    for (auto& in : v) rb.insns.push_back(std::move(in));
  };
  switch (id) {
    case 0:  // direct index leak: OOB secret load + cache transmit
      add(secret_load(1));
      add(transmit_load(1));
      break;
    case 1:  // masked index leak: transmit through a masked (in-bounds) offset
      add(secret_load(1));
      rb.insns.push_back(ins(Opcode::and_, {Operand::make_reg(13), Operand::make_imm(7)}));
      add(transmit_load(1));
      break;
    case 2:  // branch transmit: the secret decides a conditional
      add(secret_load(1));
      rb.insns.push_back(ins(Opcode::cmp, {Operand::make_reg(13), Operand::make_imm(1)}));
      rb.insns.push_back(jcc_ins(Cond::z, taken));
      break;
    case 3:  // direct index leak, word-sized accesses
      add(secret_load(4));
      add(transmit_load(4));
      break;
    case 4:  // masked leak followed by a branch transmit
      add(secret_load(1));
      rb.insns.push_back(ins(Opcode::and_, {Operand::make_reg(13), Operand::make_imm(7)}));
      add(transmit_load(1));
      rb.insns.push_back(ins(Opcode::cmp, {Operand::make_reg(13), Operand::make_imm(0)}));
      rb.insns.push_back(jcc_ins(Cond::nz, taken));
      break;
    default:
      throw std::runtime_error("unknown gadget template " + std::to_string(id));
  }
  bool has_branch = id == 2 || id == 4;
  if (!has_branch) rb.insns.push_back(ins(Opcode::jmp, {Operand::make_label(cont)}));
  t.extra_blocks.push_back(std::move(rb));

  if (has_branch) {
    BasicBlock fall;  // fallthrough of the transmit branch
    fall.label = prefix + "f";
    fall.insns.push_back(ins(Opcode::jmp, {Operand::make_label(cont)}));
    t.extra_blocks.push_back(std::move(fall));
    BasicBlock tb;
    tb.label = taken;
    tb.insns.push_back(ins(Opcode::jmp, {Operand::make_label(cont)}));
    t.extra_blocks.push_back(std::move(tb));
  }

  BasicBlock sb;
  sb.label = skip;
  sb.insns.push_back(ins(Opcode::jmp, {Operand::make_label(cont)}));
  t.extra_blocks.push_back(std::move(sb));
  return t;
}

}  // namespace

const char* gadget_template_name(int id) {
  switch (id) {
    case 0: return "direct-index-leak";
    case 1: return "masked-index-leak";
    case 2: return "branch-transmit-leak";
    case 3: return "direct-index-leak-word";
    case 4: return "masked-branch-leak";
    default: return "?";
  }
}

std::vector<std::string> eligible_sites(const Program& program) {
  Program p = program;
  build_cfg(p);
  std::vector<std::string> out;
  for (const auto& fn : p.functions) {
    if (fn.copy != CopyKind::real) continue;
    for (const auto& b : fn.blocks) {
      if (b.term != TermKind::jcc) continue;
      for (const auto& s : b.succ)
        if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

Program inject_gadgets(const Program& base, const std::vector<int>& template_ids,
                       const std::vector<std::string>& sites, InjectionGroundTruth* gt) {
  if (template_ids.size() != sites.size())
    throw std::runtime_error("inject: one site per template required");
  Program p = base;
  build_cfg(p);

  if (!template_ids.empty()) {
    std::vector<std::string> ok = eligible_sites(p);
    for (const auto& s : sites)
      if (!p.find_block(s) || std::find(ok.begin(), ok.end(), s) == ok.end())
        throw std::runtime_error("inject: '" + s + "' is not a valid splice point");

    bool has_global = false;
    for (const auto& d : p.data) has_global |= d.name == kUserGlobal;
    if (!has_global) {
      DataSegment d;
      d.name = kUserGlobal;
      d.size = 8;
      p.data.push_back(std::move(d));
    }
  }

  InjectionGroundTruth truth;
  for (size_t k = 0; k < template_ids.size(); ++k) {
    const std::string& site = sites[k];
    std::string prefix = site + "$inj" + std::to_string(k);
    std::string cont = prefix + "c";
    TemplateBlocks t = build_template(template_ids[k], prefix, cont);

    Function* owner = nullptr;
    size_t bix = 0;
    for (auto& fn : p.functions)
      for (size_t i = 0; i < fn.blocks.size(); ++i)
        if (fn.blocks[i].label == site) {
          owner = &fn;
          bix = i;
        }
    if (!owner) throw std::runtime_error("inject: lost site " + site);

    BasicBlock& site_block = owner->blocks[bix];
    BasicBlock cont_block;
    cont_block.label = cont;
    cont_block.insns = std::move(site_block.insns);
    site_block.insns = std::move(t.entry);

    InjectionRecord rec;
    rec.template_id = template_ids[k];
    rec.site_label = site;
    rec.block_labels.push_back(site);
    std::vector<BasicBlock> inserted = std::move(t.extra_blocks);
    for (const auto& nb : inserted) rec.block_labels.push_back(nb.label);
    inserted.push_back(std::move(cont_block));
    owner->blocks.insert(owner->blocks.begin() + bix + 1,
                         std::make_move_iterator(inserted.begin()),
                         std::make_move_iterator(inserted.end()));
    truth.records.push_back(std::move(rec));
  }

  if (!template_ids.empty()) {
    p.meta.harness_mode = true;
    p.meta.user_global = kUserGlobal;
    p.meta.user_global_bytes = 8;
  }
  build_cfg(p);
  p.stamp_sites();
  p.finalize();
  if (gt) *gt = std::move(truth);
  return p;
}

Program inject_gadgets_seeded(const Program& base, const std::vector<int>& template_ids,
                              uint64_t seed, InjectionGroundTruth* gt) {
  std::vector<std::string> ok = eligible_sites(base);
  if (ok.size() < template_ids.size())
    throw std::runtime_error("inject: not enough eligible splice points");
  std::mt19937_64 rng(seed);
  std::vector<std::string> picked;
  std::vector<std::string> pool = ok;
  for (size_t k = 0; k < template_ids.size(); ++k) {
    size_t i = rng() % pool.size();
    picked.push_back(pool[i]);
    pool.erase(pool.begin() + i);
  }
  return inject_gadgets(base, template_ids, picked, gt);
}

std::string InjectionGroundTruth::to_json() const {
  nlohmann::json j;
  j["format"] = "shadowspec-gt";
  j["version"] = 1;
  j["records"] = nlohmann::json::array();
  for (const auto& r : records)
    j["records"].push_back(
        {{"template", r.template_id}, {"site", r.site_label}, {"labels", r.block_labels}});
  return j.dump(1);
}

InjectionGroundTruth InjectionGroundTruth::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  if (j.value("format", "") != "shadowspec-gt")
    throw std::runtime_error("not a shadowspec ground-truth file");
  InjectionGroundTruth gt;
  for (const auto& rj : j.at("records")) {
    InjectionRecord r;
    r.template_id = rj.at("template");
    r.site_label = rj.at("site");
    r.block_labels = rj.at("labels").get<std::vector<std::string>>();
    gt.records.push_back(std::move(r));
  }
  return gt;
}

InjectionScore score_injection(const std::vector<GadgetReport>& reports,
                               const InjectionGroundTruth& gt) {
  InjectionScore s;
  std::vector<bool> hit(gt.records.size(), false);
  for (const auto& rep : reports) {
    bool matched = false;
    for (size_t i = 0; i < gt.records.size(); ++i) {
      const auto& labels = gt.records[i].block_labels;
      if (std::find(labels.begin(), labels.end(), rep.site.block) != labels.end()) {
        hit[i] = true;
        matched = true;
      }
    }
    if (!matched) s.fp++;
  }
  for (bool h : hit) s.tp += h;
  s.fn = static_cast<int>(gt.records.size()) - s.tp;
  s.precision_valid = s.tp + s.fp > 0;
  s.precision = s.precision_valid ? static_cast<double>(s.tp) / (s.tp + s.fp) : 0.0;
  s.recall = gt.records.empty() ? 0.0 : static_cast<double>(s.tp) / gt.records.size();
  return s;
}

}  // namespace shadowspec
