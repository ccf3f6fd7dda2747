// SPDX-License-Identifier: Apache-2.0
//
// shadowspec: assemble, instrument, run, fuzz, inject, score, report and
// benchmark toy-ISA programs for transient-execution gadget detection.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "shadowspec/assembler.hpp"
#include "shadowspec/cfg.hpp"
#include "shadowspec/fuzz.hpp"
#include "shadowspec/oracle.hpp"
#include "shadowspec/rewriter.hpp"
#include "shadowspec/serialize.hpp"
#include "shadowspec/vm.hpp"

namespace fs = std::filesystem;
using namespace shadowspec;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitBuildError = 2;
constexpr int kExitRuntimeFault = 3;

struct CommonOpts {
  std::string policy = "kasper";
  std::string mode = "shadows";
  bool no_nest = false;
  int rob_budget = 250;
  int check_interval = 50;
  int max_depth = 6;
  uint64_t seed = 1;
  int workers = 1;
  uint64_t executions = 1000;
  uint64_t max_steps = 1'000'000;
};

RewriteConfig rewrite_config(const CommonOpts& o) {
  RewriteConfig cfg;
  auto p = policy_from_name(o.policy);
  auto m = mode_from_name(o.mode);
  if (!p) throw RewriteError("unknown policy '" + o.policy + "'");
  if (!m || *m == InstrMode::none) throw RewriteError("unknown mode '" + o.mode + "'");
  cfg.policy = *p;
  cfg.mode = *m;
  cfg.nesting = !o.no_nest;
  cfg.rob_budget = o.rob_budget;
  cfg.check_interval = o.check_interval;
  cfg.max_nest_depth = o.max_depth;
  return cfg;
}

bool env_snapshots() {
  const char* v = std::getenv("SHADOWSPEC_DEBUG_SNAPSHOTS");
  return v && std::string(v) == "1";
}

std::vector<uint8_t> read_input_file(const std::string& path) {
  if (path.empty()) return {};
  std::string text = read_file(path);
  return std::vector<uint8_t>(text.begin(), text.end());
}

std::vector<Input> load_corpus_dir(const std::string& dir) {
  std::vector<Input> seeds;
  if (!fs::exists(dir)) {
    fs::create_directories(dir);
    write_file(dir + "/seed0", "");
  }
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) names.push_back(e.path().string());
  std::sort(names.begin(), names.end());
  for (const auto& n : names) {
    std::string text = read_file(n);
    seeds.emplace_back(text.begin(), text.end());
  }
  return seeds;
}

void emit_outputs(const RunResult& r, const Program& prog, const std::string& report_path,
                  const std::string& summary_path, bool to_stdout) {
  ReportStore store;
  for (const auto& rep : r.reports) store.add(rep);
  std::string report = store.to_text(prog.meta.policy);
  std::string summary = run_summary_text(r, prog.meta);
  if (!report_path.empty()) write_file(report_path, report);
  if (!summary_path.empty()) write_file(summary_path, summary);
  if (to_stdout) {
    std::cout << report << "\n" << summary;
  }
}

std::vector<int> parse_template_list(const std::string& s) {
  std::vector<int> out;
  std::string cur;
  for (char c : s + ",") {
    if (c == ',') {
      if (!cur.empty()) out.push_back(std::stoi(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"transient-execution gadget detection pipeline for a toy register ISA"};
  app.require_subcommand(1);

  CommonOpts o;
  std::string in_path, out_path, input_path, report_path, summary_path, gt_path, corpus_dir;
  std::string sites_arg, templates_arg = "0,1,2,3,4";
  int inject_count = 0;

  auto add_rewrite_flags = [&](CLI::App* cmd) {
    cmd->add_option("--policy", o.policy, "gadget policy: kasper or specfuzz");
    cmd->add_option("--mode", o.mode, "instrumentation mode: shadows or mixed");
    cmd->add_flag("--no-nest", o.no_nest, "disable nested speculation");
    cmd->add_option("--rob-budget", o.rob_budget, "speculative instruction budget");
    cmd->add_option("--check-interval", o.check_interval, "restore-point spacing");
    cmd->add_option("--max-depth", o.max_depth, "maximum nesting depth");
  };

  auto* asm_cmd = app.add_subcommand("assemble", "assemble a .s source into a program file");
  asm_cmd->add_option("input", in_path)->required();
  asm_cmd->add_option("-o,--out", out_path)->required();

  auto* dis_cmd = app.add_subcommand("disasm", "disassemble a program file");
  dis_cmd->add_option("input", in_path)->required();
  dis_cmd->add_option("-o,--out", out_path);

  auto* inst_cmd = app.add_subcommand("instrument", "rewrite a program for gadget detection");
  inst_cmd->add_option("input", in_path)->required();
  inst_cmd->add_option("-o,--out", out_path)->required();
  add_rewrite_flags(inst_cmd);

  auto* run_cmd = app.add_subcommand("run", "run a program on one input");
  run_cmd->add_option("program", in_path)->required();
  run_cmd->add_option("--input", input_path, "raw input bytes file");
  run_cmd->add_option("--report", report_path, "write the gadget report file here");
  run_cmd->add_option("--summary", summary_path, "write the run summary here");
  run_cmd->add_option("--max-steps", o.max_steps);
  run_cmd->add_option("--rob-budget", o.rob_budget);
  run_cmd->add_option("--max-depth", o.max_depth);

  auto* fuzz_cmd = app.add_subcommand("fuzz", "coverage-guided fuzzing");
  fuzz_cmd->add_option("program", in_path)->required();
  fuzz_cmd->add_option("--corpus", corpus_dir, "corpus directory")->required();
  double wall_seconds = 0.0;
  fuzz_cmd->add_option("--executions", o.executions);
  fuzz_cmd->add_option("--seconds", wall_seconds,
                       "optional wall-clock budget (non-deterministic)");
  fuzz_cmd->add_option("--seed", o.seed);
  fuzz_cmd->add_option("--workers", o.workers);
  fuzz_cmd->add_option("--max-steps", o.max_steps);
  fuzz_cmd->add_option("--report", report_path);
  fuzz_cmd->add_option("--summary", summary_path);

  auto* inject_cmd = app.add_subcommand("inject", "splice artificial gadgets into a program");
  inject_cmd->add_option("input", in_path)->required();
  inject_cmd->add_option("-o,--out", out_path)->required();
  inject_cmd->add_option("--gt", gt_path, "ground-truth output file")->required();
  inject_cmd->add_option("--templates", templates_arg, "comma-separated template ids (0-4)");
  inject_cmd->add_option("--sites", sites_arg, "comma-separated block labels");
  inject_cmd->add_option("--count", inject_count, "pick this many random sites");
  inject_cmd->add_option("--seed", o.seed);

  auto* score_cmd = app.add_subcommand("score", "score a report file against ground truth");
  score_cmd->add_option("--report", report_path)->required();
  score_cmd->add_option("--gt", gt_path)->required();

  auto* report_cmd = app.add_subcommand("report", "pretty-print a report file");
  report_cmd->add_option("report", report_path)->required();

  auto* bench_cmd = app.add_subcommand("bench", "instrumentation overhead metrics");
  bench_cmd->add_option("input", in_path)->required();
  bench_cmd->add_option("--input-bytes", input_path, "raw input file");
  bench_cmd->add_option("--policy", o.policy);
  bench_cmd->add_option("--max-steps", o.max_steps);
  bench_cmd->add_flag("--no-nest", o.no_nest);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (asm_cmd->parsed()) {
      Program p = assemble(read_file(in_path));
      build_cfg(p);
      p.finalize();
      save_program_file(p, out_path);
      std::cout << "assembled " << in_path << ": " << p.functions.size() << " functions, "
                << p.count_instructions(Origin::original) << " instructions\n";
      return kExitOk;
    }

    if (dis_cmd->parsed()) {
      Program p = load_program_file(in_path);
      std::string text = disassemble(p);
      if (out_path.empty())
        std::cout << text;
      else
        write_file(out_path, text);
      return kExitOk;
    }

    if (inst_cmd->parsed()) {
      Program p = load_program_file(in_path);
      Program out = instrument(p, rewrite_config(o));
      save_program_file(out, out_path);
      std::cout << "instrumented (" << o.mode << ", " << o.policy << "): "
                << out.count_instructions(Origin::original) << " originals, "
                << out.count_instructions(Origin::instrumentation) << " instrumentation\n";
      return kExitOk;
    }

    if (run_cmd->parsed()) {
      Program p = load_program_file(in_path);
      ExecImage img(std::move(p));
      RunConfig rc;
      rc.max_steps = o.max_steps;
      rc.debug_snapshots = env_snapshots();
      if (run_cmd->count("--rob-budget")) rc.rob_budget = o.rob_budget;
      if (run_cmd->count("--max-depth")) rc.max_nest_depth = o.max_depth;
      std::vector<uint8_t> input = read_input_file(input_path);
      Vm vm(img);
      RunResult r = vm.run(input, rc);
      emit_outputs(r, img.program(), report_path, summary_path, true);
      return r.status == ExitStatus::fault ? kExitRuntimeFault : kExitOk;
    }

    if (fuzz_cmd->parsed()) {
      Program p = load_program_file(in_path);
      ExecImage img(std::move(p));
      FuzzConfig fc;
      fc.executions = o.executions;
      fc.workers = o.workers;
      fc.seed = o.seed;
      fc.run.max_steps = o.max_steps;
      fc.run.debug_snapshots = env_snapshots();
      if (wall_seconds > 0) fc.wall_seconds = wall_seconds;
      std::vector<Input> seeds = load_corpus_dir(corpus_dir);
      FuzzResult fr = fuzz_loop(img, fc, seeds);
      for (size_t i = seeds.size(); i < fr.corpus.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "/retained_%05zu_%016llx", i,
                      static_cast<unsigned long long>(
                          fnv1a64(fr.corpus[i].data(), fr.corpus[i].size())));
        write_file(corpus_dir + name,
                   std::string(fr.corpus[i].begin(), fr.corpus[i].end()));
      }
      std::string report = fr.store.to_text(img.meta().policy);
      if (!report_path.empty()) write_file(report_path, report);
      RunResult agg;
      agg.coverage = fr.coverage;
      agg.counters = fr.counters;
      agg.episodes = fr.episodes;
      std::string summary = run_summary_text(agg, img.meta());
      summary += "executed " + std::to_string(fr.executed) + "\n";
      summary += "corpus_size " + std::to_string(fr.corpus.size()) + "\n";
      if (!summary_path.empty()) write_file(summary_path, summary);
      std::cout << report << "\n" << summary;
      return kExitOk;
    }

    if (inject_cmd->parsed()) {
      Program p = load_program_file(in_path);
      std::vector<int> templates = parse_template_list(templates_arg);
      InjectionGroundTruth gt;
      Program out;
      if (!sites_arg.empty()) {
        std::vector<std::string> sites;
        std::string cur;
        for (char c : sites_arg + ",") {
          if (c == ',') {
            if (!cur.empty()) sites.push_back(cur);
            cur.clear();
          } else {
            cur += c;
          }
        }
        out = inject_gadgets(p, templates, sites, &gt);
      } else {
        if (inject_count > 0) templates.resize(inject_count, 0);
        out = inject_gadgets_seeded(p, templates, o.seed, &gt);
      }
      save_program_file(out, out_path);
      write_file(gt_path, gt.to_json());
      std::cout << "injected " << gt.records.size() << " gadgets\n";
      for (const auto& r : gt.records)
        std::cout << "  template " << r.template_id << " (" << gadget_template_name(r.template_id)
                  << ") at " << r.site_label << "\n";
      return kExitOk;
    }

    if (score_cmd->parsed()) {
      auto reports = ReportStore::parse_text(read_file(report_path));
      auto gt = InjectionGroundTruth::from_json(read_file(gt_path));
      InjectionScore s = score_injection(reports, gt);
      std::printf("TP %d\nFP %d\nFN %d\n", s.tp, s.fp, s.fn);
      if (s.precision_valid)
        std::printf("precision %.1f%%\n", 100.0 * s.precision);
      else
        std::printf("precision N/A\n");
      std::printf("recall %.1f%%\n", 100.0 * s.recall);
      return kExitOk;
    }

    if (report_cmd->parsed()) {
      auto reports = ReportStore::parse_text(read_file(report_path));
      std::printf("%zu gadget record(s)\n", reports.size());
      for (const auto& r : reports) {
        std::string chain;
        for (size_t i = 0; i < r.chain.size(); ++i)
          chain += (i ? "," : "") + std::to_string(r.chain[i]);
        std::printf("%-14s pc=%-20s site=%s:%d depth=%d chain=[%s] hits=%u\n",
                    gadget_class_name(r.cls), r.symbol.c_str(), r.site.block.c_str(),
                    r.site.ordinal, r.depth, chain.c_str(), r.count);
      }
      return kExitOk;
    }

    if (bench_cmd->parsed()) {
      Program plain = load_program_file(in_path);
      std::vector<uint8_t> input = read_input_file(input_path);
      RunConfig rc;
      rc.max_steps = o.max_steps;

      struct Row {
        const char* name;
        Counters c;
      };
      std::vector<Row> rows;
      {
        ExecImage img{[&] {
          Program p = plain;
          build_cfg(p);
          p.finalize();
          return p;
        }()};
        Vm vm(img);
        rows.push_back({"none", vm.run(input, rc).counters});
      }
      for (InstrMode m : {InstrMode::shadows, InstrMode::mixed}) {
        CommonOpts local = o;
        local.mode = m == InstrMode::shadows ? "shadows" : "mixed";
        ExecImage img(instrument(plain, rewrite_config(local)));
        Vm vm(img);
        rows.push_back({mode_name(m), vm.run(input, rc).counters});
      }
      std::printf("%-8s %12s %16s %12s %16s\n", "mode", "originals", "instrumentation",
                  "guards", "instr+guards");
      for (const auto& r : rows)
        std::printf("%-8s %12llu %16llu %12llu %16llu\n", r.name,
                    static_cast<unsigned long long>(r.c.originals),
                    static_cast<unsigned long long>(r.c.instrumentation),
                    static_cast<unsigned long long>(r.c.guard_checks),
                    static_cast<unsigned long long>(r.c.instrumentation + r.c.guard_checks));
      double shadows_cost = static_cast<double>(rows[1].c.instrumentation + rows[1].c.guard_checks);
      double mixed_cost = static_cast<double>(rows[2].c.instrumentation + rows[2].c.guard_checks);
      if (shadows_cost > 0)
        std::printf("mixed/shadows dynamic instrumentation ratio: %.2f\n",
                    mixed_cost / shadows_cost);
      return kExitOk;
    }
  } catch (const AssemblyError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBuildError;
  } catch (const RewriteError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBuildError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBuildError;
  }
  return kExitUsage;
}
