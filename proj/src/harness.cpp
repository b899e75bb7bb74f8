#include "bnn/harness.hpp"

#include "bnn/packed.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include <json.hpp>

namespace bnn {

using nlohmann::json;

void ExperimentConfig::normalize_defaults() {
  augment.hflip_prob = dataset == "cifar10" ? 0.5f : 0.0f;
}

namespace {

json config_to_json_obj(const ExperimentConfig& c) {
  return json{{"dataset", c.dataset},
              {"data_dir", c.data_dir},
              {"arch", c.arch},
              {"layers", c.layers},
              {"width", c.width},
              {"patch", c.patch},
              {"binarize_weights", c.binarize_weights},
              {"binary_activations", c.binary_activations},
              {"skip_connections", c.skip_connections},
              {"algo", c.algo},
              {"lr", c.lr},
              {"gamma", c.gamma},
              {"alpha", c.alpha},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"weight_decay", c.weight_decay},
              {"clip_latent", c.clip_latent},
              {"decoupled_decay", c.decoupled_decay},
              {"augment_enabled", c.augment_enabled},
              {"hflip_prob", c.augment.hflip_prob},
              {"max_rotation_deg", c.augment.max_rotation_deg},
              {"crop_padding", c.augment.crop_padding},
              {"train_fraction", c.train_fraction}};
}

ExperimentConfig config_from_json_obj(const json& j) {
  ExperimentConfig c;
  c.dataset = j.value("dataset", c.dataset);
  c.data_dir = j.value("data_dir", c.data_dir);
  c.arch = j.value("arch", c.arch);
  c.layers = j.value("layers", c.layers);
  c.width = j.value("width", c.width);
  c.patch = j.value("patch", c.patch);
  c.binarize_weights = j.value("binarize_weights", c.binarize_weights);
  c.binary_activations = j.value("binary_activations", c.binary_activations);
  c.skip_connections = j.value("skip_connections", c.skip_connections);
  c.algo = j.value("algo", c.algo);
  c.lr = j.value("lr", c.lr);
  c.gamma = j.value("gamma", c.gamma);
  c.alpha = j.value("alpha", c.alpha);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.clip_latent = j.value("clip_latent", c.clip_latent);
  c.decoupled_decay = j.value("decoupled_decay", c.decoupled_decay);
  c.augment_enabled = j.value("augment_enabled", c.augment_enabled);
  c.augment.hflip_prob = j.value("hflip_prob", c.augment.hflip_prob);
  c.augment.max_rotation_deg = j.value("max_rotation_deg", c.augment.max_rotation_deg);
  c.augment.crop_padding = j.value("crop_padding", c.augment.crop_padding);
  c.train_fraction = j.value("train_fraction", c.train_fraction);
  return c;
}

}  // namespace

std::string ExperimentConfig::to_json() const { return config_to_json_obj(*this).dump(2); }

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  return config_from_json_obj(json::parse(text));
}

std::string RunRecord::to_json() const {
  json j;
  j["config"] = config_to_json_obj(config);
  json eps = json::array();
  for (const auto& e : epochs)
    eps.push_back(json{{"train_loss", e.train_loss},
                       {"train_acc", e.train_acc},
                       {"val_loss", e.val_loss},
                       {"val_acc", e.val_acc}});
  j["epochs"] = eps;
  j["best_val_acc"] = best_val_acc;
  j["best_epoch"] = best_epoch;
  j["test_acc"] = test_acc;
  j["test_loss"] = test_loss;
  j["peak_trace_bytes"] = peak_trace_bytes;
  j["wall_seconds"] = wall_seconds;
  j["norm_mean"] = norm_mean;
  j["norm_std"] = norm_std;
  j["failed"] = failed;
  j["failure"] = failure;
  return j.dump(2);
}

RunRecord RunRecord::from_json(const std::string& text) {
  const json j = json::parse(text);
  RunRecord r;
  r.config = config_from_json_obj(j.at("config"));
  for (const auto& e : j.value("epochs", json::array()))
    r.epochs.push_back(EpochMetrics{e.value("train_loss", 0.0f), e.value("train_acc", 0.0f),
                                    e.value("val_loss", 0.0f), e.value("val_acc", 0.0f)});
  r.best_val_acc = j.value("best_val_acc", 0.0f);
  r.best_epoch = j.value("best_epoch", -1);
  r.test_acc = j.value("test_acc", 0.0f);
  r.test_loss = j.value("test_loss", 0.0f);
  r.peak_trace_bytes = j.value("peak_trace_bytes", int64_t{0});
  r.wall_seconds = j.value("wall_seconds", 0.0);
  r.norm_mean = j.value("norm_mean", std::vector<float>{});
  r.norm_std = j.value("norm_std", std::vector<float>{});
  r.failed = j.value("failed", false);
  r.failure = j.value("failure", "");
  return r;
}

// ---- datasets -----------------------------------------------------------------

namespace {

Dataset make_synthetic(uint64_t seed, int64_t n, int classes) {
  // deterministic blob images: one bright patch location per class
  Rng rng(seed);
  Dataset ds;
  const int64_t h = 8, w = 8;
  ds.images = Tensor({n, 1, h, w});
  ds.labels.resize(static_cast<size_t>(n));
  ds.num_classes = classes;
  for (int64_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(rng.next_u64() % static_cast<uint64_t>(classes));
    ds.labels[static_cast<size_t>(i)] = cls;
    const int64_t cy = 1 + (cls / 3) * 2, cx = 1 + (cls % 3) * 2;
    float* img = ds.images.data() + i * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const float d2 = static_cast<float>((y - cy) * (y - cy) + (x - cx) * (x - cx));
        const float v = std::exp(-d2 / 3.0f) + 0.15f * rng.uniform(0.0f, 1.0f);
        img[y * w + x] = std::min(v, 1.0f);
      }
  }
  return ds;
}

}  // namespace

DataBundle load_dataset(const ExperimentConfig& cfg) {
  DataBundle bundle;
  if (cfg.dataset == "mnist" || cfg.dataset == "fashion") {
    bundle.train_full = load_idx(cfg.data_dir + "/train-images-idx3-ubyte",
                                 cfg.data_dir + "/train-labels-idx1-ubyte");
    bundle.test = HeldOutTest(load_idx(cfg.data_dir + "/t10k-images-idx3-ubyte",
                                       cfg.data_dir + "/t10k-labels-idx1-ubyte"));
  } else if (cfg.dataset == "cifar10") {
    std::vector<std::string> train_paths;
    for (int i = 1; i <= 5; ++i)
      train_paths.push_back(cfg.data_dir + "/data_batch_" + std::to_string(i) + ".bin");
    bundle.train_full = load_cifar10_bin(train_paths);
    bundle.test = HeldOutTest(load_cifar10_bin({cfg.data_dir + "/test_batch.bin"}));
  } else if (cfg.dataset == "synth") {
    bundle.train_full = make_synthetic(1001, 2048, 10);
    Dataset test = make_synthetic(1002, 512, 10);
    test.split = "test";
    bundle.test = HeldOutTest(std::move(test));
  } else {
    throw std::invalid_argument("unknown dataset: " + cfg.dataset);
  }
  return bundle;
}

// ---- evaluation -----------------------------------------------------------------

std::pair<float, float> evaluate_split(ModelGraph& model, const Dataset& split,
                                       const Normalizer& norm, int batch_size) {
  const int64_t n = split.size();
  const int64_t c = split.images.dim(1), h = split.images.dim(2), w = split.images.dim(3);
  const int64_t sample = c * h * w;
  double loss_acc = 0.0;
  int64_t correct = 0;
  for (int64_t b0 = 0; b0 < n; b0 += batch_size) {
    const int64_t nb = std::min<int64_t>(batch_size, n - b0);
    Tensor x({nb, c, h, w});
    std::memcpy(x.data(), split.images.data() + b0 * sample,
                static_cast<size_t>(nb * sample) * 4);
    x = norm.apply(x);
    std::vector<int> labels(split.labels.begin() + b0, split.labels.begin() + b0 + nb);
    const Tensor y = one_hot(labels, split.num_classes);
    const Tensor logits = forward(model, x, Mode::Eval, RetentionPolicy::None, nullptr);
    const auto res = softmax_cross_entropy(logits, y);
    loss_acc += static_cast<double>(res.loss) * static_cast<double>(nb);
    const auto pred = argmax_rows(logits);
    for (int64_t i = 0; i < nb; ++i)
      if (pred[static_cast<size_t>(i)] == labels[static_cast<size_t>(i)]) ++correct;
  }
  return {static_cast<float>(loss_acc / static_cast<double>(n)),
          static_cast<float>(static_cast<double>(correct) / static_cast<double>(n))};
}

std::pair<float, float> HeldOutTest::evaluate(ModelGraph& model, const Normalizer& norm,
                                              int batch_size) const {
  return evaluate_split(model, test_, norm, batch_size);
}

std::pair<float, float> HeldOutTest::evaluate_packed(const PackedModel& pm,
                                                     const Normalizer& norm,
                                                     int batch_size) const {
  const int64_t n = test_.size();
  const int64_t sample = test_.images.size() / n;
  double loss_acc = 0.0;
  int64_t correct = 0;
  for (int64_t b0 = 0; b0 < n; b0 += batch_size) {
    const int64_t nb = std::min<int64_t>(batch_size, n - b0);
    Tensor x({nb, test_.images.dim(1), test_.images.dim(2), test_.images.dim(3)});
    std::memcpy(x.data(), test_.images.data() + b0 * sample,
                static_cast<size_t>(nb * sample) * 4);
    x = norm.apply(x);
    std::vector<int> labels(test_.labels.begin() + b0, test_.labels.begin() + b0 + nb);
    const Tensor logits = packed_forward(pm, x);
    const auto res = softmax_cross_entropy(logits, one_hot(labels, test_.num_classes));
    loss_acc += static_cast<double>(res.loss) * static_cast<double>(nb);
    const auto pred = argmax_rows(logits);
    for (int64_t i = 0; i < nb; ++i)
      if (pred[static_cast<size_t>(i)] == labels[static_cast<size_t>(i)]) ++correct;
  }
  return {static_cast<float>(loss_acc / static_cast<double>(n)),
          static_cast<float>(static_cast<double>(correct) / static_cast<double>(n))};
}

// ---- run_experiment ----------------------------------------------------------------

RunRecord run_experiment(const ExperimentConfig& cfg, const DataBundle& data) {
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.config = cfg;

  Rng root(cfg.seed);
  Rng rng_split = root.fork();
  Rng rng_model = root.fork();
  Rng rng_feedback = root.fork();
  Rng rng_order = root.fork();
  Rng rng_augment = root.fork();

  auto [train, val] = split_train_val(data.train_full, cfg.train_fraction, rng_split);
  const Normalizer norm = Normalizer::fit(train);
  rec.norm_mean = norm.mean;
  rec.norm_std = norm.std;

  ModelSpec spec;
  spec.layers = cfg.layers;
  spec.width = cfg.width;
  spec.patch = cfg.patch;
  spec.input_shape = train.sample_shape();
  spec.num_classes = train.num_classes;
  ModelOptions options;
  options.binarize_weights = cfg.binarize_weights;
  options.binary_activations = cfg.binary_activations;
  options.skip_connections = cfg.skip_connections;
  ModelGraph model = build_model(arch_from_name(cfg.arch), spec, options, rng_model);

  TrainingStrategy strategy(algo_from_name(cfg.algo), model, rng_feedback, cfg.gamma,
                            cfg.alpha);
  strategy.set_collect_diagnostics(false);
  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  adam_cfg.weight_decay = cfg.weight_decay;
  adam_cfg.decoupled = cfg.decoupled_decay;
  adam_cfg.clip_latent = cfg.clip_latent;
  AdamState adam(model, adam_cfg);

  const int64_t n = train.size();
  const int64_t c = train.images.dim(1), h = train.images.dim(2), w = train.images.dim(3);
  const int64_t sample = c * h * w;
  const int64_t steps = n / cfg.batch_size;  // full batches only
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  auto finish = [&] {
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int64_t i = n - 1; i > 0; --i) {
      const int64_t j =
          static_cast<int64_t>(rng_order.next_u64() % static_cast<uint64_t>(i + 1));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    double loss_sum = 0.0;
    int64_t correct = 0;
    for (int64_t step = 0; step < steps; ++step) {
      Tensor x({cfg.batch_size, c, h, w});
      std::vector<int> labels(static_cast<size_t>(cfg.batch_size));
      for (int64_t i = 0; i < cfg.batch_size; ++i) {
        const int64_t src = order[static_cast<size_t>(step * cfg.batch_size + i)];
        std::memcpy(x.data() + i * sample, train.images.data() + src * sample,
                    static_cast<size_t>(sample) * 4);
        labels[static_cast<size_t>(i)] = train.labels[static_cast<size_t>(src)];
      }
      if (cfg.augment_enabled) x = augment(x, cfg.augment, rng_augment);
      x = norm.apply(x);
      const Tensor y = one_hot(labels, train.num_classes);

      try {
        const TrainStepResult result = strategy.train_step(model, x, y);
        if (!std::isfinite(result.loss))
          throw std::runtime_error("non-finite loss");
        rec.peak_trace_bytes = std::max(rec.peak_trace_bytes, result.peak_trace_bytes);
        loss_sum += static_cast<double>(result.loss) * cfg.batch_size;
        const auto pred = argmax_rows(result.logits);
        for (int64_t i = 0; i < cfg.batch_size; ++i)
          if (pred[static_cast<size_t>(i)] == labels[static_cast<size_t>(i)]) ++correct;
        adam.step(model, result.grads);
      } catch (const std::exception& e) {
        rec.failed = true;
        rec.failure = "epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                      ": " + e.what();
        return finish();
      }
    }
    EpochMetrics m;
    m.train_loss = static_cast<float>(loss_sum / static_cast<double>(steps * cfg.batch_size));
    m.train_acc = static_cast<float>(static_cast<double>(correct) /
                                     static_cast<double>(steps * cfg.batch_size));
    std::tie(m.val_loss, m.val_acc) = evaluate_split(model, val, norm, cfg.batch_size);
    rec.epochs.push_back(m);
    if (m.val_acc > rec.best_val_acc) {
      rec.best_val_acc = m.val_acc;
      rec.best_epoch = epoch;
    }
  }

  std::tie(rec.test_loss, rec.test_acc) = data.test.evaluate(model, norm, cfg.batch_size);
  return finish();
}

// ---- grid search ---------------------------------------------------------------------

std::vector<float> lr_grid() { return {1e-3f, 1e-4f, 1e-5f}; }
std::vector<float> gamma_grid() { return {2.0f, 20.0f, 200.0f}; }
std::vector<float> alpha_grid() { return {1.0f, 0.1f, 0.01f}; }

GridResult grid_search(const ExperimentConfig& base, const DataBundle& data, int repeats,
                       int grid_epochs, const std::vector<float>& lr_override) {
  const AlgoKind kind = algo_from_name(base.algo);
  struct Point {
    float lr;
    float value;  // gamma or alpha where applicable
    int listed_index;
  };
  std::vector<Point> points;
  const std::vector<float> values = kind == AlgoKind::HSIC    ? gamma_grid()
                                    : kind == AlgoKind::SigpropTL ? alpha_grid()
                                                                  : std::vector<float>{0.0f};
  const std::vector<float> lrs = lr_override.empty() ? lr_grid() : lr_override;
  for (float lr : lrs)
    for (size_t v = 0; v < values.size(); ++v)
      points.push_back({lr, values[v], static_cast<int>(v)});

  GridResult result;
  int best_index = -1;
  for (size_t p = 0; p < points.size(); ++p) {
    ExperimentConfig cfg = base;
    cfg.lr = points[p].lr;
    if (kind == AlgoKind::HSIC) cfg.gamma = points[p].value;
    if (kind == AlgoKind::SigpropTL) cfg.alpha = points[p].value;
    cfg.epochs = grid_epochs;
    result.grid_records.push_back(run_experiment(cfg, data));
    const RunRecord& rec = result.grid_records.back();
    if (rec.failed) continue;
    if (best_index < 0) {
      best_index = static_cast<int>(p);
      continue;
    }
    const RunRecord& best_rec = result.grid_records[static_cast<size_t>(best_index)];
    const Point& a = points[p];
    const Point& b = points[static_cast<size_t>(best_index)];
    const bool better =
        rec.best_val_acc > best_rec.best_val_acc ||
        (rec.best_val_acc == best_rec.best_val_acc &&
         (a.lr < b.lr || (a.lr == b.lr && a.listed_index < b.listed_index)));
    if (better) best_index = static_cast<int>(p);
  }
  if (best_index < 0) throw std::runtime_error("grid_search: every run failed");

  result.best = base;
  result.best.lr = points[static_cast<size_t>(best_index)].lr;
  if (kind == AlgoKind::HSIC) result.best.gamma = points[static_cast<size_t>(best_index)].value;
  if (kind == AlgoKind::SigpropTL)
    result.best.alpha = points[static_cast<size_t>(best_index)].value;

  double mean_acc = 0.0;
  for (int r = 0; r < repeats; ++r) {
    ExperimentConfig cfg = result.best;
    cfg.seed = base.seed + static_cast<uint64_t>(r);
    result.repeat_records.push_back(run_experiment(cfg, data));
    mean_acc += result.repeat_records.back().test_acc;
  }
  mean_acc /= std::max(repeats, 1);
  double var = 0.0;
  for (const auto& rec : result.repeat_records)
    var += (rec.test_acc - mean_acc) * (rec.test_acc - mean_acc);
  var /= std::max(repeats, 1);  // population convention
  result.mean_test_acc = static_cast<float>(mean_acc);
  result.std_test_acc = static_cast<float>(std::sqrt(var));
  return result;
}

// ---- reports ----------------------------------------------------------------------

ArchId arch_from_name(const std::string& name) {
  if (name == "mlp") return ArchId::MlpPlain;
  if (name == "mlp_residual") return ArchId::MlpResidual;
  if (name == "conv") return ArchId::ConvPlain;
  if (name == "mixer") return ArchId::MiniMixer;
  throw std::invalid_argument("unknown architecture: " + name);
}

namespace {

struct CellStats {
  std::vector<float> accs;
  std::vector<int64_t> peaks;
  std::vector<double> times;
};

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), format, v);
  return buf;
}

}  // namespace

std::string report(const std::vector<RunRecord>& records, ReportFormat format,
                   bool with_times) {
  if (records.empty()) throw std::invalid_argument("report: no records");
  std::map<std::string, CellStats> cells;
  for (const auto& rec : records) {
    if (rec.failed) continue;
    const auto& c = rec.config;
    const std::string key = c.dataset + "," + c.arch + "," + c.algo + "," +
                            (c.binarize_weights ? "1" : "0") + "," +
                            (c.binary_activations ? "1" : "0") + "," +
                            (c.skip_connections ? "1" : "0");
    auto& cell = cells[key];
    cell.accs.push_back(rec.test_acc);
    cell.peaks.push_back(rec.peak_trace_bytes);
    cell.times.push_back(rec.wall_seconds);
  }

  struct Row {
    std::string key;
    double mean, stdev, peak_mean, time_mean;
    size_t runs;
  };
  std::vector<Row> rows;
  for (const auto& [key, cell] : cells) {
    double mean = 0.0;
    for (float a : cell.accs) mean += 100.0 * a;
    mean /= static_cast<double>(cell.accs.size());
    double var = 0.0;
    for (float a : cell.accs) var += (100.0 * a - mean) * (100.0 * a - mean);
    var /= static_cast<double>(cell.accs.size());  // population convention
    double peak = 0.0;
    for (int64_t p : cell.peaks) peak += static_cast<double>(p);
    peak /= static_cast<double>(cell.peaks.size());
    double time = 0.0;
    for (double t : cell.times) time += t;
    time /= static_cast<double>(cell.times.size());
    rows.push_back({key, mean, std::sqrt(var), peak, time, cell.accs.size()});
  }

  std::ostringstream os;
  switch (format) {
    case ReportFormat::Csv: {
      os << "dataset,arch,algo,binary_weights,binary_activations,skip_connections,runs,"
            "test_acc_mean,test_acc_std,peak_trace_bytes";
      if (with_times) os << ",wall_seconds_mean";
      os << "\r\n";
      for (const auto& r : rows) {
        os << r.key << "," << r.runs << "," << fmt("%.1f", r.mean) << ","
           << fmt("%.2f", r.stdev) << "," << fmt("%.0f", r.peak_mean);
        if (with_times) os << "," << fmt("%.1f", r.time_mean);
        os << "\r\n";
      }
      break;
    }
    case ReportFormat::Json: {
      json j;
      json cells_json = json::array();
      for (const auto& r : rows) {
        json cell{{"key", r.key},
                  {"runs", r.runs},
                  {"test_acc_mean", r.mean},
                  {"test_acc_std", r.stdev},
                  {"peak_trace_bytes", r.peak_mean}};
        if (with_times) cell["wall_seconds_mean"] = r.time_mean;
        cells_json.push_back(cell);
      }
      j["cells"] = cells_json;
      json recs = json::array();
      for (const auto& rec : records) recs.push_back(json::parse(rec.to_json()));
      j["records"] = recs;
      os << j.dump(2);
      break;
    }
    case ReportFormat::Table: {
      os << "dataset/arch/algo/binW/binA/skip                    runs  accuracy     "
            "peak bytes";
      if (with_times) os << "   seconds";
      os << "\n";
      for (const auto& r : rows) {
        std::string key = r.key;
        for (auto& ch : key)
          if (ch == ',') ch = '/';
        os << key;
        for (size_t i = key.size(); i < 52; ++i) os << ' ';
        os << r.runs << "     " << fmt("%.1f", r.mean) << " (" << fmt("%.2f", r.stdev)
           << ")  " << fmt("%.0f", r.peak_mean);
        if (with_times) os << "  " << fmt("%.1f", r.time_mean);
        os << "\n";
      }
      break;
    }
  }
  return os.str();
}

}  // namespace bnn
