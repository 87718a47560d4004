#include "changetitans/train.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace ctitans {

Scalar grad_norm(const ParamList& params) {
  Scalar total = 0;
  for (const auto& [name, p] : params)
    if (p.has_grad())
      for (auto g : p.grad()) total += g * g;
  return std::sqrt(total);
}

Scalar clip_grad_norm(const ParamList& params, Scalar max_norm) {
  const Scalar norm = grad_norm(params);
  if (max_norm > 0 && norm > max_norm) {
    const Scalar f = max_norm / norm;
    for (const auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      Tensor t = p;
      for (auto& g : t.mutable_grad()) g *= f;
    }
  }
  return norm;
}

Tensor sample_loss(const ChangeTitans& model, const SamplePair& sample) {
  auto prob = change_probability(model.logits(sample.image_t1, sample.image_t2));
  return total_loss(prob, sample.mask, model.config().loss);
}

std::string first_nonfinite_module(const ChangeTitans& model, const SamplePair& sample) {
  NoGradGuard guard;
  std::string first;
  auto probe = [&](const std::string& module, const Tensor& t) {
    if (first.empty() && !all_finite(t)) first = module;
  };
  auto logits = model.logits(sample.image_t1, sample.image_t2, probe);
  if (!first.empty()) return first;
  auto loss = total_loss(change_probability(logits), sample.mask, model.config().loss);
  return all_finite(loss) ? "" : "loss";
}

Trainer::Trainer(ChangeTitans& model, const TrainConfig& cfg)
    : model_(model), cfg_(cfg), params_(model.parameters()) {
  for (const auto& [name, p] : params_) {
    m1_.emplace_back(p.numel(), 0.0);
    if (cfg_.optimizer == OptimizerKind::Adam) m2_.emplace_back(p.numel(), 0.0);
  }
}

Scalar Trainer::step(const SamplePair& sample) {
  for (auto& [name, p] : params_) p.zero_grad();
  auto loss = sample_loss(model_, sample);
  const Scalar value = loss.item();
  if (!std::isfinite(value)) {
    auto module = first_nonfinite_module(model_, sample);
    if (module.empty()) module = "loss";
    throw NonFiniteError(module, steps_ + 1,
                         "non-finite loss at step " + std::to_string(steps_ + 1) + " on pair '" +
                             sample.id + "'; first non-finite output: " + module);
  }
  loss.backward();
  for (const auto& [name, p] : params_)
    if (p.has_grad())
      for (auto g : p.grad())
        if (!std::isfinite(g))
          throw NonFiniteError(name, steps_ + 1,
                               "non-finite gradient at step " + std::to_string(steps_ + 1) +
                                   " in parameter " + name);
  clip_grad_norm(params_, cfg_.gradient_clipping);

  ++steps_;
  const Scalar lr = cfg_.learning_rate;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i].second;
    if (!p.has_grad()) continue;
    auto data = p.mutable_data();
    const auto g = p.grad();
    auto& m1 = m1_[i];
    if (cfg_.optimizer == OptimizerKind::Sgd) {
      for (std::size_t k = 0; k < data.size(); ++k) {
        const Scalar gk = g[k] + cfg_.weight_decay * data[k];
        m1[k] = cfg_.momentum * m1[k] + gk;
        data[k] -= lr * m1[k];
      }
    } else {
      auto& m2 = m2_[i];
      const Scalar c1 = 1 - std::pow(cfg_.beta1, static_cast<Scalar>(steps_));
      const Scalar c2 = 1 - std::pow(cfg_.beta2, static_cast<Scalar>(steps_));
      for (std::size_t k = 0; k < data.size(); ++k) {
        const Scalar gk = g[k] + cfg_.weight_decay * data[k];
        m1[k] = cfg_.beta1 * m1[k] + (1 - cfg_.beta1) * gk;
        m2[k] = cfg_.beta2 * m2[k] + (1 - cfg_.beta2) * gk * gk;
        data[k] -= lr * (m1[k] / c1) / (std::sqrt(m2[k] / c2) + cfg_.adam_eps);
      }
    }
  }
  return value;
}

std::vector<Scalar> Trainer::run(const std::vector<SamplePair>& data, std::size_t until,
                                 const std::function<void(std::size_t, Scalar)>& on_step) {
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  std::vector<Scalar> losses;
  while (steps_ < until) {
    const std::size_t i = steps_ % data.size();
    Scalar loss;
    if (cfg_.augment) {
      // Symmetry index is a fixed function of the step so runs stay reproducible.
      const unsigned which = static_cast<unsigned>((steps_ / data.size() * 5 + i * 3) % 8);
      loss = step(dihedral(data[i], which));
    } else {
      loss = step(data[i]);
    }
    losses.push_back(loss);
    if (on_step) on_step(steps_, loss);
  }
  return losses;
}

NamedTensors Trainer::state() const {
  NamedTensors out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& [name, p] = params_[i];
    out.emplace_back(name + ".m1", Tensor(p.shape(), m1_[i]));
    if (!m2_.empty()) out.emplace_back(name + ".m2", Tensor(p.shape(), m2_[i]));
  }
  return out;
}

void Trainer::load_state(const NamedTensors& state, std::size_t steps) {
  std::map<std::string, Tensor> by_name(state.begin(), state.end());
  auto fetch = [&](const std::string& name, const Tensor& like) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("optimizer state lacks " + name);
    if (it->second.shape() != like.shape())
      throw FormatError("optimizer state " + name + " has shape " + to_string(it->second.shape()));
    return it->second.to_vector();
  };
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& [name, p] = params_[i];
    m1_[i] = fetch(name + ".m1", p);
    if (!m2_.empty()) m2_[i] = fetch(name + ".m2", p);
  }
  steps_ = steps;
}

std::vector<MetricReport> evaluate_model(const ChangeTitans& model, const std::vector<SamplePair>& data,
                                         double tau, double trimap_width) {
  std::vector<MetricReport> out;
  for (const auto& s : data) {
    const auto map = model.forward(s.image_t1, s.image_t2);
    BinaryMask pred(map.height, map.width, map.mask);
    std::vector<std::uint8_t> gt(s.mask.numel());
    for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = s.mask[i] != 0 ? 1 : 0;
    out.push_back(evaluate(pred, BinaryMask(map.height, map.width, gt), tau, trimap_width));
  }
  return out;
}

double dataset_f1(const ChangeTitans& model, const std::vector<SamplePair>& data) {
  ConfusionCounts total;
  for (const auto& s : data) {
    const auto map = model.forward(s.image_t1, s.image_t2);
    std::vector<std::uint8_t> gt(s.mask.numel());
    for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = s.mask[i] != 0 ? 1 : 0;
    const auto c = confusion(BinaryMask(map.height, map.width, map.mask),
                             BinaryMask(map.height, map.width, gt));
    total.tp += c.tp;
    total.fp += c.fp;
    total.fn += c.fn;
    total.tn += c.tn;
  }
  return pixel_metrics(total).f1;
}

std::string loss_csv(const std::vector<Scalar>& losses, std::size_t first_step) {
  std::ostringstream os;
  os << "# changetitans loss csv v1\nstep,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    auto res = std::to_chars(buf, buf + sizeof buf, losses[i]);
    os << first_step + i << ',' << std::string_view(buf, res.ptr - buf) << '\n';
  }
  return os.str();
}

namespace {

constexpr const char* kCheckpointFormat = "changetitans checkpoint v1";

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os << text;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const RunConfig& cfg, const ChangeTitans& model,
                     const Trainer* trainer, const std::vector<Scalar>& loss_trace) {
  std::filesystem::create_directories(dir);
  const std::size_t step = trainer ? trainer->step_count() : 0;
  std::ostringstream meta;
  meta << kCheckpointFormat << '\n'
       << "config_hash=" << config_hash(cfg) << '\n'
       << "step=" << step << '\n';
  write_text(dir / "config.txt", serialize_config(cfg));
  NamedTensors weights;
  for (const auto& [name, p] : model.parameters()) weights.emplace_back(name, p.detach());
  save_named_tensors(dir / "weights.tcdt", weights);
  save_named_tensors(dir / "optimizer.tcdt", trainer ? trainer->state() : NamedTensors{});
  write_text(dir / "loss.csv", loss_csv(loss_trace));
  // Written last so a partially written directory is never mistaken for a checkpoint.
  write_text(dir / "checkpoint.txt", meta.str());
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  Checkpoint ck;
  std::istringstream meta(read_text(dir / "checkpoint.txt"));
  std::string line;
  std::getline(meta, line);
  if (line != kCheckpointFormat) throw FormatError(dir.string() + ": not a checkpoint (" + line + ")");
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const auto key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "config_hash") ck.config_hash = std::stoull(value);
    else if (key == "step") ck.step = std::stoull(value);
  }
  ck.config = parse_config(read_text(dir / "config.txt"));
  if (config_hash(ck.config) != ck.config_hash)
    throw FormatError(dir.string() + ": config hash mismatch");
  ck.weights = load_named_tensors(dir / "weights.tcdt");
  ck.optimizer = load_named_tensors(dir / "optimizer.tcdt");
  std::istringstream losses(read_text(dir / "loss.csv"));
  while (std::getline(losses, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("step", 0) == 0) continue;
    const auto comma = line.find(',');
    double v = 0;
    std::from_chars(line.data() + comma + 1, line.data() + line.size(), v);
    ck.loss_trace.push_back(v);
  }
  return ck;
}

void assign_weights(ChangeTitans& model, const NamedTensors& weights) {
  auto params = model.parameters();
  if (params.size() != weights.size())
    throw FormatError("checkpoint has " + std::to_string(weights.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, p] = params[i];
    const auto& [wname, w] = weights[i];
    if (name != wname) throw FormatError("checkpoint tensor " + wname + " where " + name + " was expected");
    if (p.shape() != w.shape())
      throw FormatError("checkpoint tensor " + name + " has shape " + to_string(w.shape()) +
                        ", model expects " + to_string(p.shape()));
    std::copy(w.data().begin(), w.data().end(), p.mutable_data().begin());
  }
}

}  // namespace ctitans
