#include "changetitans/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "changetitans/data.hpp"
#include "changetitans/image_io.hpp"
#include "changetitans/metrics.hpp"
#include "changetitans/oracles.hpp"
#include "changetitans/pipeline.hpp"
#include "changetitans/serialize.hpp"
#include "changetitans/train.hpp"

namespace ctitans {

namespace fs = std::filesystem;

unsigned worker_threads() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("TCD_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && cap > 0) n = std::min<unsigned>(n, static_cast<unsigned>(cap));
  }
  return n;
}

namespace {

// Raised for invalid arguments or inputs discovered before work starts.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Calls fn(i) for i in [0, n) on up to `threads` workers. Results must be
// written to per-index slots so the output order does not depend on timing.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

void require_dir(const fs::path& p, const std::string& what) {
  if (!fs::is_directory(p)) throw UsageError(what + " '" + p.string() + "' is not a directory");
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw UsageError(what + " '" + p.string() + "' does not exist");
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

BinaryMask to_binary(const Tensor& mask) {
  std::vector<std::uint8_t> px(mask.numel());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = mask[i] != 0 ? 1 : 0;
  return BinaryMask(mask.dim(0), mask.dim(1), std::move(px));
}

// ---- synth ----------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t n = 8, size = 32, max_objects = 3, channels = 3;
  std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  if (a.size < 32 || a.size % 32 != 0) throw UsageError("--size must be >= 32 and divisible by 32");
  if (a.channels != 1 && a.channels != 3) throw UsageError("--channels must be 1 or 3");
  const auto pairs = synth_dataset(a.seed, a.n, a.size, a.max_objects, a.channels);
  save_dataset(a.out, pairs);
  out << "wrote " << pairs.size() << " pairs (" << a.size << "x" << a.size << ") to " << a.out << "\n";
  return kExitOk;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out, resume;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::size_t log_every = 50;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  require_file(a.config, "config");
  require_dir(a.data, "dataset");
  if (!a.resume.empty()) require_file(fs::path(a.resume) / "checkpoint.txt", "checkpoint");
  RunConfig cfg = load_config(a.config);
  if (a.seed) cfg.model.seed = *a.seed;
  if (a.steps) cfg.train.steps = *a.steps;
  const auto data = load_dataset(a.data);
  for (const auto& s : data)
    if (s.image_t1.dim(0) != cfg.model.encoder.image_channels)
      throw UsageError("pair '" + s.id + "' has " + std::to_string(s.image_t1.dim(0)) +
                       " channels, config expects image_channels=" +
                       std::to_string(cfg.model.encoder.image_channels));

  ChangeTitans model(cfg.model);
  Trainer trainer(model, cfg.train);
  std::vector<Scalar> trace;
  if (!a.resume.empty()) {
    auto ck = load_checkpoint(a.resume);
    RunConfig resumed = ck.config;
    resumed.train.steps = cfg.train.steps;
    if (config_hash(resumed) != config_hash(cfg))
      throw UsageError("checkpoint '" + a.resume + "' was trained with a different configuration");
    assign_weights(model, ck.weights);
    trainer.load_state(ck.optimizer, ck.step);
    trace = ck.loss_trace;
    out << "resumed from step " << ck.step << "\n";
  }
  out << "training " << model.parameters().size() << " tensors on " << data.size() << " pairs for "
      << cfg.train.steps << " steps\n";
  const auto t0 = std::chrono::steady_clock::now();
  try {
    trainer.run(data, cfg.train.steps, [&](std::size_t step, Scalar loss) {
      trace.push_back(loss);
      if (a.log_every > 0 && (step % a.log_every == 0 || step == cfg.train.steps)) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out << "step " << step << "/" << cfg.train.steps << " loss " << fixed(loss, 6) << " ("
            << fixed(secs, 1) << "s)\n" << std::flush;
      }
    });
  } catch (const NonFiniteError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  }
  save_checkpoint(a.out, cfg, model, &trainer, trace);
  out << "train_f1=" << fixed(dataset_f1(model, data)) << "\n";
  out << "checkpoint written to " << a.out << "\n";
  return kExitOk;
}

// ---- infer ----------------------------------------------------------------

struct InferArgs {
  std::string checkpoint, t1, t2, data, out, id;
};

int cmd_infer(const InferArgs& a, std::ostream& out) {
  require_file(fs::path(a.checkpoint) / "checkpoint.txt", "checkpoint");
  const bool single = !a.t1.empty() || !a.t2.empty();
  if (single == !a.data.empty()) throw UsageError("give either --t1/--t2 or --data");
  std::vector<SamplePair> pairs;
  if (single) {
    require_file(a.t1, "--t1");
    require_file(a.t2, "--t2");
    SamplePair p;
    p.image_t1 = to_tensor(read_pnm(a.t1));
    p.image_t2 = to_tensor(read_pnm(a.t2));
    p.id = a.id.empty() ? fs::path(a.t1).stem().string() : a.id;
    pairs.push_back(std::move(p));
  } else {
    require_dir(a.data, "dataset");
    pairs = load_dataset(a.data);
  }
  const auto ck = load_checkpoint(a.checkpoint);
  ChangeTitans model(ck.config.model);
  assign_weights(model, ck.weights);
  fs::create_directories(a.out);
  std::vector<ChangeMap> maps(pairs.size());
  parallel_for(pairs.size(), worker_threads(),
               [&](std::size_t i) { maps[i] = model.forward(pairs[i].image_t1, pairs[i].image_t2); });
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& m = maps[i];
    save_mask(fs::path(a.out) / (pairs[i].id + ".pgm"), m.mask, m.height, m.width);
    save_tensor(fs::path(a.out) / (pairs[i].id + ".prob.tcdt"), m.probability.detach());
    if (!all_finite(m.probability)) throw NumericError("non-finite probabilities for " + pairs[i].id);
  }
  out << "wrote " << pairs.size() << " masks to " << a.out << "\n";
  return kExitOk;
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
  std::string pred, gt, out;
  double tau = 2.0, trimap_width = 3.0;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  require_dir(a.pred, "prediction directory");
  require_dir(a.gt, "ground-truth directory");
  if (a.tau < 0) throw UsageError("--tau must be >= 0");
  if (a.trimap_width < 1) throw UsageError("--trimap-width must be >= 1");
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(a.gt))
    if (e.is_regular_file() && e.path().extension() == ".pgm") ids.push_back(e.path().stem().string());
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw UsageError("no .pgm masks in '" + a.gt + "'");
  for (const auto& id : ids) require_file(fs::path(a.pred) / (id + ".pgm"), "prediction");

  std::vector<MetricReport> reports(ids.size());
  parallel_for(ids.size(), worker_threads(), [&](std::size_t i) {
    const auto pred = to_binary(load_mask(fs::path(a.pred) / (ids[i] + ".pgm")));
    const auto gt = to_binary(load_mask(fs::path(a.gt) / (ids[i] + ".pgm")));
    reports[i] = evaluate(pred, gt, a.tau, a.trimap_width);
  });
  std::string csv = report_csv_header();
  MetricReport mean;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    csv += report_csv_row(ids[i], reports[i]);
    mean.precision += reports[i].precision / ids.size();
    mean.recall += reports[i].recall / ids.size();
    mean.f1 += reports[i].f1 / ids.size();
    mean.iou += reports[i].iou / ids.size();
    mean.bf1 += reports[i].bf1 / ids.size();
    mean.trimap_miou += reports[i].trimap_miou / ids.size();
    mean.hausdorff = std::max(mean.hausdorff, reports[i].hausdorff);
  }
  mean.tau = a.tau;
  mean.trimap_width = a.trimap_width;
  if (a.out.empty()) {
    out << csv;
  } else {
    std::ofstream os(a.out);
    if (!os) throw UsageError("cannot write '" + a.out + "'");
    os << csv;
    out << "pairs=" << ids.size() << "\n" << report_text(mean);
  }
  return kExitOk;
}

// ---- gradcheck ------------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed, bool verbose, std::ostream& out) {
  std::size_t failed = 0, total = 0;
  Scalar worst = 0;
  run_gradient_oracles(seed, [&](const OracleResult& r) {
    ++total;
    worst = std::max(worst, r.error);
    if (!r.pass()) ++failed;
    if (verbose || !r.pass())
      out << (r.pass() ? "ok   " : "FAIL ") << r.name << " err=" << std::scientific << std::setprecision(2)
          << r.error << " tol=" << r.threshold << std::defaultfloat << "\n";
  });
  out << "gradcheck: " << total - failed << "/" << total << " passed, worst error " << std::scientific
      << std::setprecision(2) << worst << std::defaultfloat << "\n";
  return failed == 0 ? kExitOk : kExitNumeric;
}

// ---- ablate ---------------------------------------------------------------

struct AblateArgs {
  std::string config, data, out;
  std::vector<std::string> variants{"sum", "diff", "conv", "siam_diff", "siam_conc", "early_fusion"};
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> seed;
};

int cmd_ablate(const AblateArgs& a, std::ostream& out, std::ostream& err) {
  require_file(a.config, "config");
  require_dir(a.data, "dataset");
  RunConfig base = load_config(a.config);
  if (a.seed) base.model.seed = *a.seed;
  if (a.steps) base.train.steps = *a.steps;
  std::vector<Fusion> variants;
  for (const auto& v : a.variants) variants.push_back(parse_fusion(v));
  const auto data = load_dataset(a.data);

  std::ostringstream csv;
  csv << "# changetitans ablation csv v1\n"
      << "variant,steps,final_loss,f1,iou,bf1,trimap_miou,hausdorff\n";
  out << std::left << std::setw(14) << "variant" << std::setw(10) << "loss" << std::setw(8) << "f1"
      << std::setw(8) << "iou" << std::setw(8) << "bf1" << "\n";
  for (auto v : variants) {
    RunConfig cfg = base;
    cfg.model.fusion = v;
    ChangeTitans model(cfg.model);
    Trainer trainer(model, cfg.train);
    std::vector<Scalar> losses;
    try {
      losses = trainer.run(data, cfg.train.steps);
    } catch (const NonFiniteError& e) {
      err << "numeric failure in variant " << to_string(v) << ": " << e.what() << "\n";
      return kExitNumeric;
    }
    const auto reports = evaluate_model(model, data);
    MetricReport mean;
    for (const auto& r : reports) {
      mean.f1 += r.f1 / reports.size();
      mean.iou += r.iou / reports.size();
      mean.bf1 += r.bf1 / reports.size();
      mean.trimap_miou += r.trimap_miou / reports.size();
      mean.hausdorff = std::max(mean.hausdorff, r.hausdorff);
    }
    const double final_loss = losses.empty() ? 0.0 : losses.back();
    csv << to_string(v) << ',' << cfg.train.steps << ',' << final_loss << ',' << mean.f1 << ',' << mean.iou
        << ',' << mean.bf1 << ',' << mean.trimap_miou << ','
        << (std::isinf(mean.hausdorff) ? std::string("inf") : std::to_string(mean.hausdorff)) << '\n';
    out << std::left << std::setw(14) << to_string(v) << std::setw(10) << fixed(final_loss) << std::setw(8)
        << fixed(mean.f1, 3) << std::setw(8) << fixed(mean.iou, 3) << std::setw(8) << fixed(mean.bf1, 3)
        << "\n" << std::flush;
  }
  if (!a.out.empty()) {
    std::ofstream os(a.out);
    if (!os) throw UsageError("cannot write '" + a.out + "'");
    os << csv.str();
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bi-temporal change detection with neural-memory transformers", "changetitans"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write a synthetic dataset (A/, B/, label/)");
  s->add_option("--out", synth.out, "Output dataset directory")->required();
  s->add_option("--n", synth.n, "Number of pairs");
  s->add_option("--size", synth.size, "Image side in pixels (multiple of 32)");
  s->add_option("--max-objects", synth.max_objects, "Objects per pair are drawn from 1..max");
  s->add_option("--channels", synth.channels, "1 (PGM) or 3 (PPM)");
  s->add_option("--seed", synth.seed, "Random seed");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model and write a checkpoint directory");
  t->add_option("--config", train.config, "key=value config file")->required();
  t->add_option("--data", train.data, "Dataset directory")->required();
  t->add_option("--out", train.out, "Checkpoint directory")->required();
  t->add_option("--resume", train.resume, "Continue from this checkpoint");
  t->add_option("--seed", train.seed, "Overrides the config seed");
  t->add_option("--steps", train.steps, "Overrides the config step count");
  t->add_option("--log-every", train.log_every, "Progress line interval (0 = quiet)");

  InferArgs infer;
  auto* i = app.add_subcommand("infer", "Predict change masks with a trained checkpoint");
  i->add_option("--checkpoint", infer.checkpoint, "Checkpoint directory")->required();
  i->add_option("--t1", infer.t1, "First frame (PPM/PGM)");
  i->add_option("--t2", infer.t2, "Second frame (PPM/PGM)");
  i->add_option("--id", infer.id, "Output name for a single pair");
  i->add_option("--data", infer.data, "Dataset directory (all pairs)");
  i->add_option("--out", infer.out, "Output directory for <id>.pgm and <id>.prob.tcdt")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score predicted masks against ground truth");
  e->add_option("--pred", ev.pred, "Directory of predicted <id>.pgm masks")->required();
  e->add_option("--gt", ev.gt, "Directory of ground-truth <id>.pgm masks")->required();
  e->add_option("--tau", ev.tau, "Boundary F1 tolerance in pixels");
  e->add_option("--trimap-width", ev.trimap_width, "Trimap band half-width in pixels");
  e->add_option("--out", ev.out, "CSV file (default: CSV on stdout)");

  std::uint64_t gc_seed = 7;
  bool gc_verbose = false;
  auto* g = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  g->add_option("--seed", gc_seed, "Random seed for the probes");
  g->add_flag("--verbose", gc_verbose, "Print every check");

  AblateArgs ablate;
  auto* ab = app.add_subcommand("ablate", "Train each fusion variant and tabulate training-set metrics");
  ab->add_option("--config", ablate.config, "Base config file")->required();
  ab->add_option("--data", ablate.data, "Dataset directory")->required();
  ab->add_option("--variants", ablate.variants, "Fusion variants to compare")->delimiter(',');
  ab->add_option("--steps", ablate.steps, "Overrides the config step count");
  ab->add_option("--seed", ablate.seed, "Overrides the config seed");
  ab->add_option("--out", ablate.out, "CSV file");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (s->parsed()) return cmd_synth(synth, out);
    if (t->parsed()) return cmd_train(train, out, err);
    if (i->parsed()) return cmd_infer(infer, out);
    if (e->parsed()) return cmd_eval(ev, out);
    if (g->parsed()) return cmd_gradcheck(gc_seed, gc_verbose, out);
    if (ab->parsed()) return cmd_ablate(ablate, out, err);
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& ex) {
    err << "input error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& ex) {
    err << "numeric failure: " << ex.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitError;
  }
  return kExitConfig;
}

}  // namespace ctitans
