// Licensed under the Apache License, Version 2.0. See LICENSE in the project root.

// mml: command-line driver for data generation, training, evaluation,
// parameter sweeps and gradient checks.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mml/config.hpp"
#include "mml/datagen.hpp"
#include "mml/evalkit.hpp"
#include "mml/trainer.hpp"

namespace fs = std::filesystem;

namespace {

enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kConfigError = 2,
  kDataError = 3,
  kDivergence = 4,
  kGradcheckFailed = 5,
  kAllCellsFailed = 6,
};

struct CommonArgs {
  std::string config_path;
  std::string data_path;
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw mml::DataError("cannot write '" + path + "'");
  os << text;
  if (!os) throw mml::DataError("write failed for '" + path + "'");
}

mml::RunConfig resolve(const CommonArgs& args, const std::vector<std::string>& overrides) {
  mml::RunConfig cfg;
  if (!args.config_path.empty()) cfg.load_file(args.config_path);
  for (const auto& o : overrides) cfg.apply_override(o);
  return cfg;
}

std::string config_header(const mml::RunConfig& cfg) {
  return "# resolved configuration\n" + cfg.to_text();
}

int cmd_gen_data(const mml::RunConfig& cfg, const std::string& out) {
  const auto spec = cfg.data();
  const auto ds = mml::gen_longtail(spec);
  mml::save_dataset(ds, out);
  write_text(out + ".cfg", config_header(cfg));
  const auto counts = ds.class_counts();
  std::vector<std::size_t> held(counts.size(), 0);
  for (auto i : ds.indices(mml::Split::heldout)) ++held[static_cast<std::size_t>(ds.labels[i])];
  std::cout << "wrote " << ds.size() << " samples, " << counts.size() << " classes to " << out << "\n";
  std::cout << "class,count,train,heldout\n";
  for (std::size_t k = 0; k < counts.size(); ++k) {
    std::cout << k << ',' << counts[k] << ',' << counts[k] - held[k] << ',' << held[k] << "\n";
  }
  return kOk;
}

int cmd_train(const mml::RunConfig& cfg, const std::string& data_path, const std::string& out,
              std::string trace_path) {
  const auto tc = cfg.train();
  const auto ds = mml::load_dataset(data_path);
  if (trace_path.empty()) trace_path = out + ".trace.csv";
  try {
    const auto res = mml::run_training(tc, ds, cfg.echo());
    mml::save_checkpoint(res.checkpoint, out);
    write_text(trace_path, mml::trace_csv(res.trace));
    write_text(trace_path + ".cfg", config_header(cfg));
    if (!res.trace.empty()) {
      const auto& last = res.trace.back();
      std::cout << "iterations " << last.iter << " loss " << mml::format_double(last.metrics.loss_total)
                << " min_centre_sqdist " << mml::format_double(last.min_centre_sqdist)
                << " violating_pairs " << last.violating_pairs << "\n";
    }
    std::cout << "checkpoint " << out << "\ntrace " << trace_path << "\n";
    return kOk;
  } catch (const mml::DivergenceError& e) {
    const std::string snap = out + ".diverged.json";
    mml::save_checkpoint({e.snapshot(), cfg.echo()}, snap);
    std::cerr << "training diverged: " << e.what() << "\ndiagnostic snapshot: " << snap << "\n";
    return kDivergence;
  }
}

int cmd_eval(const mml::RunConfig& cfg, const std::string& data_path, const std::string& ckpt_path,
             const std::string& baseline_path, const std::string& out_dir) {
  const auto opt = cfg.eval();
  const auto ds = mml::load_dataset(data_path);
  const auto ck = mml::load_checkpoint(ckpt_path);
  if (ck.state.embedder.input_dim() != ds.inputs.cols()) {
    throw mml::DataError("checkpoint expects input_dim " + std::to_string(ck.state.embedder.input_dim()) +
                         " but dataset has " + std::to_string(ds.inputs.cols()));
  }
  auto wants = [&](const char* p) { return std::find(opt.protocols.begin(), opt.protocols.end(), p) != opt.protocols.end(); };
  if (wants("histogram") && (!opt.hist_lo || !opt.hist_hi)) {
    throw mml::ConfigError("histogram protocol needs eval.hist_lo and eval.hist_hi");
  }
  fs::create_directories(out_dir);
  const mml::Matrix emb = mml::embed_all(ck.state.embedder, ds);
  const auto held = ds.indices(mml::Split::heldout);
  std::vector<int> held_labels;
  for (auto i : held) held_labels.push_back(ds.labels[i]);

  mml::EvalReport rep;
  nlohmann::json echo = cfg.echo();
  echo["checkpoint"] = ckpt_path;
  echo["data"] = data_path;
  rep.config = echo;

  if (wants("verification") || wants("roc")) {
    const auto pairs = mml::make_pairs(ds, mml::Split::heldout, opt.num_pos, opt.num_neg, cfg.seed());
    write_text(out_dir + "/pairs.json", mml::to_json(pairs).dump() + "\n");
    if (wants("verification")) {
      rep.verification = mml::verify_pairs(emb, pairs, opt.folds, opt.metric);
      std::cout << "verification_accuracy " << mml::format_double(rep.verification->accuracy) << "\n";
    }
    if (wants("roc")) {
      std::vector<double> pos, neg;
      for (const auto& p : pairs) {
        (p.same ? pos : neg).push_back(mml::pair_distance(emb.row(p.a), emb.row(p.b), opt.metric));
      }
      rep.roc = mml::roc(pos, neg);
      for (double level : opt.far_levels) rep.vr_at_far[level] = mml::vr_at_far(*rep.roc, level);
      write_text(out_dir + "/roc.csv", mml::roc_csv(*rep.roc));
      std::cout << "roc_auc " << mml::format_double(rep.roc->auc) << "\n";
    }
  }
  if (wants("cmc")) {
    const auto proto = mml::make_ident_protocol(ds, opt.num_probe_ids, opt.num_distractors, cfg.seed());
    write_text(out_dir + "/protocol.json", mml::to_json(proto).dump() + "\n");
    rep.cmc = mml::cmc(proto, emb, opt.metric);
    write_text(out_dir + "/cmc.csv", mml::cmc_csv(*rep.cmc));
    std::cout << "rank1 " << mml::format_double(rep.cmc->rank_rates.front()) << "\n";
  }
  if (wants("histogram")) {
    const auto held_emb = mml::gather_rows(emb, held);
    rep.histogram = mml::nearest_centre_histogram(held_emb, held_labels, opt.hist_bins, *opt.hist_lo, *opt.hist_hi);
    std::vector<long> delta;
    if (!baseline_path.empty()) {
      const auto base = mml::load_checkpoint(baseline_path);
      const auto base_emb = mml::gather_rows(mml::embed_all(base.state.embedder, ds), held);
      const auto hb = mml::nearest_centre_histogram(base_emb, held_labels, opt.hist_bins, *opt.hist_lo, *opt.hist_hi);
      delta = mml::compare_histograms(hb, *rep.histogram);
      write_text(out_dir + "/histogram_baseline.csv", mml::histogram_csv(hb));
      write_text(out_dir + "/histogram_compare.csv", mml::histogram_csv(*rep.histogram, delta));
    }
    write_text(out_dir + "/histogram.csv", mml::histogram_csv(*rep.histogram));
  }
  write_text(out_dir + "/report.json", mml::to_json(rep).dump(1) + "\n");
  write_text(out_dir + "/run.cfg", config_header(cfg));
  std::cout << "report " << out_dir << "/report.json\n";
  return kOk;
}

std::string cell_name(const mml::SweepCell& c, mml::SweepParameter p) {
  return "cell_" + mml::to_string(p) + "_" + mml::format_double(c.value) + "_seed" + std::to_string(c.seed) + ".json";
}

int cmd_sweep(const mml::RunConfig& cfg, const std::string& data_path, const std::string& out_dir) {
  const auto tc = cfg.train();
  const auto so = cfg.sweep();
  const auto opt = cfg.eval();
  if (so.values.empty()) throw mml::ConfigError("sweep.values is empty");
  if (so.seeds.empty()) throw mml::ConfigError("sweep.seeds is empty");
  const auto ds = mml::load_dataset(data_path);
  std::optional<mml::Checkpoint> warm;
  if (!tc.warm_start.empty()) warm = mml::load_checkpoint(tc.warm_start);
  const auto pairs = mml::make_pairs(ds, mml::Split::heldout, opt.num_pos, opt.num_neg, cfg.seed());

  fs::create_directories(out_dir);
  auto table = mml::sweep(tc, so.parameter, so.values, so.seeds, ds, warm ? &*warm : nullptr, pairs, opt.folds,
                          opt.metric, true);
  for (auto& c : table.cells) {
    if (!c.checkpoint) continue;
    c.checkpoint->config = cfg.echo();
    c.checkpoint->config[so.parameter == mml::SweepParameter::margin ? "train.margin" : "train.beta"] =
        mml::format_double(c.value);
    c.checkpoint->config["seed"] = std::to_string(c.seed);
    mml::save_checkpoint(*c.checkpoint, out_dir + "/" + cell_name(c, so.parameter));
  }
  write_text(out_dir + "/table.csv", mml::sweep_csv(table));
  write_text(out_dir + "/run.cfg", config_header(cfg));
  std::cout << mml::sweep_csv(table);
  for (const auto& c : table.cells)
    if (!c.ok) std::cerr << "cell " << mml::format_double(c.value) << "/" << c.seed << " failed: " << c.error << "\n";
  std::cout << "failures " << table.failures() << " of " << table.cells.size() << "\n";
  return table.failures() == table.cells.size() ? kAllCellsFailed : kOk;
}

int cmd_gradcheck(const mml::RunConfig& cfg, const std::string& data_path) {
  const auto tc = cfg.train();
  const auto go = cfg.gradcheck();
  const auto ds = mml::load_dataset(data_path);
  const auto rep = mml::gradcheck(tc, ds, go);
  std::cout << "component,max_rel_error\n";
  for (std::size_t i = 0; i < rep.components.size(); ++i) {
    std::cout << rep.components[i] << ',' << mml::format_double(rep.max_rel_error[i]) << "\n";
  }
  std::cout << "coordinates " << rep.coordinates_checked << " tolerance " << mml::format_double(rep.tolerance) << "\n";
  for (const auto& f : rep.failures) {
    std::cerr << "FAIL " << f.component << " " << f.coordinate << " analytic " << mml::format_double(f.analytic)
              << " numeric " << mml::format_double(f.numeric) << " rel " << mml::format_double(f.rel_error) << "\n";
  }
  std::cout << (rep.passed() ? "PASS" : "FAIL") << "\n";
  return rep.passed() ? kOk : kGradcheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Minimum margin loss experiments"};
  app.require_subcommand(1);
  CommonArgs common;
  std::string out, trace, checkpoint, baseline, out_dir;
  std::string sweep_param, sweep_values, sweep_seeds;

  auto add_common = [&](CLI::App* sub, bool needs_data) {
    sub->add_option("-c,--config", common.config_path, "Config file");
    auto* d = sub->add_option("--data", common.data_path, "Dataset file (JSON-Lines)");
    if (needs_data) d->required();
    sub->allow_extras();
    sub->footer("Any config key can be overridden with --section.key=value.");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate a long-tailed synthetic dataset");
  add_common(gen, false);
  gen->add_option("-o,--out", out, "Output dataset path")->required();

  auto* tr = app.add_subcommand("train", "Train an embedder");
  add_common(tr, true);
  tr->add_option("-o,--out", out, "Output checkpoint path")->required();
  tr->add_option("--trace", trace, "Metrics trace CSV (default: <out>.trace.csv)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(ev, true);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();
  ev->add_option("--baseline", baseline, "Baseline checkpoint for histogram comparison");
  ev->add_option("--out-dir", out_dir, "Report directory")->required();

  auto* sw = app.add_subcommand("sweep", "Sweep M or beta over seeds");
  add_common(sw, true);
  sw->add_option("--out-dir", out_dir, "Output directory")->required();
  sw->add_option("--parameter", sweep_param, "M or beta (overrides sweep.parameter)");
  sw->add_option("--values", sweep_values, "Comma-separated values (overrides sweep.values)");
  sw->add_option("--seeds", sweep_seeds, "Comma-separated seeds (overrides sweep.seeds)");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  add_common(gc, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    auto cfg = resolve(common, sub->remaining());
    if (sub == gen) return cmd_gen_data(cfg, out);
    if (sub == tr) return cmd_train(cfg, common.data_path, out, trace);
    if (sub == ev) return cmd_eval(cfg, common.data_path, checkpoint, baseline, out_dir);
    if (sub == sw) {
      if (!sweep_param.empty()) cfg.set("sweep.parameter", sweep_param);
      if (!sweep_values.empty()) cfg.set("sweep.values", sweep_values);
      if (!sweep_seeds.empty()) cfg.set("sweep.seeds", sweep_seeds);
      return cmd_sweep(cfg, common.data_path, out_dir);
    }
    if (sub == gc) return cmd_gradcheck(cfg, common.data_path);
  } catch (const mml::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const mml::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const mml::CheckpointError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const mml::DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kDivergence;
  } catch (const mml::CentreBankError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
  return kInternal;
}
