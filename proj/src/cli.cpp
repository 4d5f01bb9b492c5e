#include "tcl/cli.hpp"

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "tcl/config.hpp"
#include "tcl/errors.hpp"
#include "tcl/evaluation.hpp"
#include "tcl/kernels.hpp"

namespace tcl::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using training::TrainConfig;

// Rows share the configured augmentation; only "w/o aug" ties the two views.
std::vector<AblationRow> gate_rows() {
  return {
      {"CMA+ITM+MLM",
       [](TrainConfig& c) {
         c.step.gates.imc = false;
         c.step.gates.lmi = false;
       }},
      {"+IMC (w/o aug)",
       [](TrainConfig& c) {
         c.step.gates.lmi = false;
         c.batch.augment.tie_views = true;
       }},
      {"+IMC", [](TrainConfig& c) { c.step.gates.lmi = false; }},
      {"+IMC+LMI", [](TrainConfig&) {}},
  };
}

std::vector<AblationRow> pooling_rows() {
  std::vector<AblationRow> rows;
  for (bool pool : {true, false})
    for (bool tap : {false, true})
      rows.push_back({std::string(pool ? "pooled" : "unpooled") + ", " + (tap ? "intermediate" : "last") + " layer",
                      [pool, tap](TrainConfig& c) {
                        c.step.lmi_pool = pool;
                        c.step.lmi_from_tap = tap;
                      }});
  return rows;
}

std::vector<AblationRow> momentum_rows(const std::vector<double>& values) {
  std::vector<AblationRow> rows;
  for (double m : values) {
    std::ostringstream name;
    name << "m=" << m;
    rows.push_back({name.str(), [m](TrainConfig& c) { c.momentum = m; }});
  }
  return rows;
}

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "flat key = value config file");
  cmd->add_option("--set", c.overrides, "override one config key (key=value), repeatable");
  cmd->add_option("--out", c.out_dir, "output directory");
  cmd->add_option("--seed", c.seed, "overrides the config seed");
}

TrainConfig resolve(const Common& c) {
  TrainConfig cfg;
  if (!c.config_path.empty()) config::apply_all(cfg, config::read_file(c.config_path));
  for (const auto& kv : c.overrides) {
    const auto [k, v] = config::parse_override(kv);
    config::apply(cfg, k, v);
  }
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

json recall_json(const evaluation::Recall& r) { return {{"r1", r.r1}, {"r5", r.r5}, {"r10", r.r10}}; }

json retrieval_json(const evaluation::RetrievalResult& r) {
  return {{"tr", recall_json(r.tr)},
          {"ir", recall_json(r.ir)},
          {"mean_recall", r.mean_recall},
          {"n_queries", r.n_queries}};
}

void on_interrupt(int) { training::stop_flag().store(true); }

struct InterruptGuard {
  InterruptGuard() { previous = std::signal(SIGINT, on_interrupt); }
  ~InterruptGuard() { std::signal(SIGINT, previous); }
  void (*previous)(int);
};

void write_similarity(const fs::path& path, const Matrix& sim) {
  std::ofstream f(path, std::ios::binary);
  f.write("TCLS", 4);
  const auto rows = static_cast<std::uint32_t>(sim.rows()), cols = static_cast<std::uint32_t>(sim.cols());
  f.write(reinterpret_cast<const char*>(&rows), 4);
  f.write(reinterpret_cast<const char*>(&cols), 4);
  for (double v : sim.storage()) {
    const auto x = static_cast<float>(v);
    f.write(reinterpret_cast<const char*>(&x), 4);
  }
}

int cmd_train(const Common& c, const std::optional<std::string>& resume,
              const std::optional<std::size_t>& steps, std::ostream& out) {
  const TrainConfig cfg = resolve(c);
  training::RunOptions opts;
  opts.out_dir = c.out_dir;
  if (resume) opts.resume = fs::path(*resume);
  opts.stop_after = steps;
  opts.log = &out;
  InterruptGuard guard;
  const auto res = training::run(cfg, opts);
  if (res.interrupted) {
    out << "interrupted at step " << res.steps << "; checkpoint written to "
        << (fs::path(c.out_dir) / "checkpoint.tclk").string() << "\n";
    return kOk;
  }
  if (res.evaluated) {
    out << retrieval_json(res.retrieval).dump(2) << "\n";
  } else {
    out << "stopped at step " << res.steps << "; checkpoint written to "
        << (fs::path(c.out_dir) / "checkpoint.tclk").string() << "\n";
  }
  return kOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint_path, bool dump_sim, std::ostream& out) {
  const fs::path path = checkpoint_path.empty() ? fs::path(c.out_dir) / "checkpoint.tclk" : fs::path(checkpoint_path);
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path.string());
  const auto container = checkpoint::load(path);
  TrainConfig cfg;
  const auto online = training::load_online_model(container, &cfg);
  // Overrides only affect which held-out split is built.
  for (const auto& kv : c.overrides) {
    const auto [k, v] = config::parse_override(kv);
    config::apply(cfg, k, v);
  }
  const auto corpus = training::build_corpus(cfg);
  const auto r = training::evaluate_retrieval(*online, corpus.eval, cfg.eval_batch);
  json j;
  j["checkpoint"] = path.string();
  j["step"] = container.meta_at("step");
  j["build"] = container.meta.contains("build") ? container.meta.at("build") : "unknown";
  j["retrieval"] = retrieval_json(r);
  fs::create_directories(c.out_dir);
  std::ofstream(fs::path(c.out_dir) / "eval.json") << j.dump(2) << "\n";
  if (dump_sim) {
    // Recompute the similarity matrix for the dump.
    const std::size_t n = corpus.eval.size(), dp = cfg.encoder.d_proj;
    Matrix img(n, dp), txt(n, dp);
    std::vector<const data::Image*> images;
    std::vector<data::TokenIds> ids;
    for (const auto& p : corpus.eval) {
      images.push_back(&p.image);
      ids.push_back(p.caption);
    }
    online->params().set_requires_grad(false);
    const auto zi = model::project(online->vision.encode(images), online->proj_v, model::ProjectWhich::cls);
    const auto zt = model::project(online->text.encode(ids), online->proj_t, model::ProjectWhich::cls);
    Matrix sim(n, n);
    kernels::gemm_nt(zi->value.data(), zt->value.data(), sim.data(), n, dp, n, false);
    write_similarity(fs::path(c.out_dir) / "similarity.f32", sim);
  }
  out << j.dump(2) << "\n";
  return kOk;
}

int cmd_gradcheck(const Common& c, std::size_t seeds, std::size_t max_entries, std::ostream& out) {
  const std::uint64_t first = c.seed.value_or(0);
  bool ok = true;
  json runs = json::array();
  for (std::size_t s = 0; s < seeds; ++s) {
    evaluation::GradcheckConfig g;
    g.seed = first + s;
    g.max_entries = max_entries;
    const auto report = evaluation::gradcheck(g);
    json terms = json::array();
    for (const auto& t : report.terms) {
      out << "seed " << g.seed << " " << std::setw(5) << evaluation::to_string(t.term) << "  max rel err "
          << std::scientific << std::setprecision(3) << t.max_rel_error << std::defaultfloat << "  worst "
          << t.worst_param << "[" << t.worst_index << "]" << (t.passed ? "  ok" : "  FAIL") << "\n";
      terms.push_back({{"term", evaluation::to_string(t.term)},
                       {"max_rel_error", t.max_rel_error},
                       {"worst_param", t.worst_param},
                       {"worst_index", t.worst_index},
                       {"entries", t.entries_checked},
                       {"passed", t.passed}});
    }
    out << "seed " << g.seed << " linearity error " << report.linearity_error << "\n";
    runs.push_back({{"seed", g.seed}, {"terms", terms}, {"linearity_error", report.linearity_error},
                    {"passed", report.passed}});
    ok = ok && report.passed;
  }
  fs::create_directories(c.out_dir);
  std::ofstream(fs::path(c.out_dir) / "gradcheck.json") << json{{"runs", runs}, {"passed", ok}}.dump(2) << "\n";
  out << (ok ? "gradcheck passed\n" : "gradcheck FAILED\n");
  return ok ? kOk : kValidation;
}

int cmd_micheck(const Common& c, std::size_t steps, std::ostream& out) {
  evaluation::NceCheckConfig nc;
  nc.steps = steps;
  nc.seed = c.seed.value_or(0);
  bool ok = true;
  json rows = json::array();
  auto report = [&](const std::string& name, const evaluation::DiscreteJoint& j, bool correlated) {
    const auto r = evaluation::nce_bound_check(j, nc);
    bool pass = r.bound <= r.exact + 0.05;
    if (correlated) pass = pass && r.bound >= 0.8 * r.exact;
    ok = ok && pass;
    out << std::left << std::setw(14) << name << " exact " << std::fixed << std::setprecision(4) << r.exact
        << "  bound " << r.bound << "  margin " << r.margin << std::defaultfloat
        << (r.inconclusive ? "  inconclusive" : "") << (pass ? "  ok" : "  FAIL") << "\n";
    rows.push_back({{"joint", name}, {"exact", r.exact}, {"bound", r.bound}, {"margin", r.margin},
                    {"inconclusive", r.inconclusive}, {"passed", pass}});
  };
  for (std::uint64_t s = 0; s < 10; ++s) report("joint-" + std::to_string(s), evaluation::regression_joint(s), false);
  report("correlated-8", evaluation::correlated_joint(8), true);
  const std::vector<double> u(8, 0.125);
  report("independent-8", evaluation::independent_joint(u, u), false);
  fs::create_directories(c.out_dir);
  std::ofstream(fs::path(c.out_dir) / "micheck.json") << json{{"rows", rows}, {"passed", ok}}.dump(2) << "\n";
  return ok ? kOk : kValidation;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("--momenta: cannot parse '" + item + "'");
    }
  }
  return out;
}

int cmd_ablate(const Common& c, std::size_t seeds, const std::string& sweeps, const std::string& momenta,
               std::ostream& out) {
  const TrainConfig base = resolve(c);
  struct Sweep {
    std::string name;
    std::vector<AblationRow> rows;
  };
  std::vector<Sweep> all;
  if (sweeps.find("gates") != std::string::npos) all.push_back({"gates", gate_rows()});
  if (sweeps.find("pooling") != std::string::npos) all.push_back({"pooling", pooling_rows()});
  if (sweeps.find("momentum") != std::string::npos) all.push_back({"momentum", momentum_rows(parse_list(momenta))});
  require_config(!all.empty(), "--sweeps must name at least one of gates, pooling, momentum");

  InterruptGuard guard;
  json doc = json::object();
  for (const auto& sweep : all) {
    out << "\n" << sweep.name << " sweep (" << seeds << " seed" << (seeds == 1 ? "" : "s") << ")\n";
    out << std::left << std::setw(34) << "row" << std::right << std::setw(9) << "TR R@1" << std::setw(9)
        << "IR R@1" << std::setw(13) << "mean recall" << "\n";
    json rows = json::array();
    for (std::size_t r = 0; r < sweep.rows.size(); ++r) {
      const auto& row = sweep.rows[r];
      double tr1 = 0, ir1 = 0, mean = 0;
      json per_seed = json::array();
      for (std::size_t s = 0; s < seeds; ++s) {
        TrainConfig cfg = base;
        row.apply(cfg);
        cfg.seed = base.seed + s;
        training::RunOptions opts;
        opts.out_dir = fs::path(c.out_dir) / sweep.name / ("row" + std::to_string(r)) / ("seed" + std::to_string(cfg.seed));
        const auto res = training::run(cfg, opts);
        if (res.interrupted) throw std::runtime_error("ablation interrupted");
        tr1 += res.retrieval.tr.r1;
        ir1 += res.retrieval.ir.r1;
        mean += res.retrieval.mean_recall;
        per_seed.push_back(retrieval_json(res.retrieval));
      }
      const double k = static_cast<double>(seeds);
      out << std::left << std::setw(34) << row.name << std::right << std::fixed << std::setprecision(4)
          << std::setw(9) << tr1 / k << std::setw(9) << ir1 / k << std::setw(13) << mean / k
          << std::defaultfloat << "\n" << std::flush;
      rows.push_back({{"row", row.name}, {"tr_r1", tr1 / k}, {"ir_r1", ir1 / k}, {"mean_recall", mean / k},
                      {"seeds", per_seed}});
    }
    doc[sweep.name] = rows;
  }
  std::ofstream(fs::path(c.out_dir) / "ablation.json") << doc.dump(2) << "\n";
  return kOk;
}

int cmd_gen_data(const Common& c, std::ostream& out) {
  const TrainConfig cfg = resolve(c);
  const auto corpus = training::build_corpus(cfg);
  fs::create_directories(c.out_dir);
  const auto train_path = fs::path(c.out_dir) / "train.tcld";
  const auto eval_path = fs::path(c.out_dir) / "eval.tcld";
  data::save_dataset(train_path, corpus.train, cfg.grid);
  data::save_dataset(eval_path, corpus.eval, cfg.grid);
  out << "wrote " << corpus.train.size() << " pairs to " << train_path.string() << " and "
      << corpus.eval.size() << " pairs to " << eval_path.string() << "\n";
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"triple contrastive pre-training on synthetic image-caption pairs", "tcl"};
  app.require_subcommand(1);

  Common train_c, eval_c, grad_c, mi_c, ablate_c, gen_c;
  std::optional<std::string> resume;
  std::optional<std::size_t> train_steps;
  std::string checkpoint_path;
  bool dump_sim = false;
  std::size_t grad_seeds = 5, grad_entries = 0, mi_steps = 3000, ablate_seeds = 1;
  std::string sweeps = "gates,pooling,momentum", momenta = "0.5,0.995";

  auto* train = app.add_subcommand("train", "run pre-training and the final retrieval evaluation");
  add_common(train, train_c);
  train->add_option("--resume", resume, "checkpoint to resume from");
  train->add_option("--steps", train_steps, "stop after this many steps and checkpoint");

  auto* eval = app.add_subcommand("eval", "zero-shot retrieval of a checkpoint on the held-out split");
  add_common(eval, eval_c);
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint file (default OUT/checkpoint.tclk)");
  eval->add_flag("--dump-similarity", dump_sim, "write the f32 similarity matrix to OUT/similarity.f32");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every loss term");
  add_common(grad, grad_c);
  grad->add_option("--seeds", grad_seeds, "number of micro-config seeds");
  grad->add_option("--max-entries", grad_entries, "entries checked per tensor (0: all)");

  auto* mi = app.add_subcommand("miCheck", "InfoNCE bound against exact MI on discrete joints");
  add_common(mi, mi_c);
  mi->add_option("--steps", mi_steps, "critic training steps");

  auto* ablate = app.add_subcommand("ablate", "loss-gate, LMI pooling/layer and momentum sweeps");
  add_common(ablate, ablate_c);
  ablate->add_option("--seeds", ablate_seeds, "seeds per row");
  ablate->add_option("--sweeps", sweeps, "comma list of gates, pooling, momentum");
  ablate->add_option("--momenta", momenta, "momentum coefficients for the momentum sweep");

  auto* gen = app.add_subcommand("gen-data", "write the training and held-out splits as TCLD files");
  add_common(gen, gen_c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }

  kernels::configure_threads();
  try {
    if (*train) return cmd_train(train_c, resume, train_steps, out);
    if (*eval) return cmd_eval(eval_c, checkpoint_path, dump_sim, out);
    if (*grad) return cmd_gradcheck(grad_c, grad_seeds, grad_entries, out);
    if (*mi) return cmd_micheck(mi_c, mi_steps, out);
    if (*ablate) return cmd_ablate(ablate_c, ablate_seeds, sweeps, momenta, out);
    if (*gen) return cmd_gen_data(gen_c, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kRuntime;
}

}  // namespace tcl::cli
