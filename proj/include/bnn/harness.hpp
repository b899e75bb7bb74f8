#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bnn/algorithms.hpp"
#include "bnn/data.hpp"
#include "bnn/graph.hpp"
#include "bnn/optim.hpp"

namespace bnn {

/// Everything that defines one run: the unit of the grid search.
struct ExperimentConfig {
  std::string dataset = "mnist";  // mnist | fashion | cifar10 | synth
  std::string data_dir = "/root/data/mnist";
  std::string arch = "mlp";  // mlp | mlp_residual | conv | mixer
  int layers = 3;
  int width = 512;
  int patch = 7;
  bool binarize_weights = false;
  bool binary_activations = false;
  bool skip_connections = true;
  std::string algo = "bp";
  float lr = 1e-3f;
  float gamma = 2.0f;
  float alpha = 1.0f;
  int epochs = 20;          // desk-scale default; the reference protocol used 80
  int batch_size = 128;
  uint64_t seed = 1;
  float weight_decay = 1e-5f;
  bool clip_latent = false;
  bool decoupled_decay = false;
  bool augment_enabled = true;
  AugmentConfig augment;     // hflip on for cifar10 (set by normalize_defaults)
  float train_fraction = 0.9f;

  /// Fills dataset-dependent defaults (hflip for cifar10 only).
  void normalize_defaults();

  std::string to_json() const;
  static ExperimentConfig from_json(const std::string& text);
};

struct EpochMetrics {
  float train_loss = 0.0f;
  float train_acc = 0.0f;
  float val_loss = 0.0f;
  float val_acc = 0.0f;
};

struct RunRecord {
  ExperimentConfig config;
  std::vector<EpochMetrics> epochs;
  float best_val_acc = 0.0f;
  int best_epoch = -1;
  float test_acc = 0.0f;
  float test_loss = 0.0f;
  int64_t peak_trace_bytes = 0;
  double wall_seconds = 0.0;
  std::vector<float> norm_mean, norm_std;  // stored normalization statistics
  bool failed = false;
  std::string failure;  // names the offending step on divergence

  std::string to_json() const;
  static RunRecord from_json(const std::string& text);
};

/// The held-out test split. Its only accessor evaluates a finished model, so
/// no training or selection code can read test data.
class HeldOutTest {
 public:
  HeldOutTest() = default;
  explicit HeldOutTest(Dataset test) : test_(std::move(test)) {}
  int64_t size() const { return test_.size(); }
  /// Batched eval-mode accuracy and loss.
  std::pair<float, float> evaluate(ModelGraph& model, const Normalizer& norm,
                                   int batch_size) const;
  std::pair<float, float> evaluate_packed(const struct PackedModel& pm,
                                          const Normalizer& norm, int batch_size) const;

 private:
  Dataset test_;
};

struct DataBundle {
  Dataset train_full;
  HeldOutTest test;
};

/// Loads the dataset named by the config (IDX pairs for mnist/fashion,
/// CIFAR-10 binaries, or the deterministic synthetic blobs used for smoke
/// runs and tests).
DataBundle load_dataset(const ExperimentConfig& cfg);

/// Trains one configuration end to end: seeded split, augmentation,
/// normalization, per-epoch metrics, peak retained-trace accounting, and one
/// final test evaluation. Deterministic given (config, seed). Divergence
/// (non-finite loss or gradients) marks the record failed with the step.
RunRecord run_experiment(const ExperimentConfig& cfg, const DataBundle& data);

/// One evaluation pass (no augmentation, eval-mode batchnorm).
std::pair<float, float> evaluate_split(ModelGraph& model, const Dataset& split,
                                       const Normalizer& norm, int batch_size);

// ---- grid search ------------------------------------------------------------

struct GridResult {
  std::vector<RunRecord> grid_records;
  ExperimentConfig best;
  std::vector<RunRecord> repeat_records;  // winner re-run across seeds
  float mean_test_acc = 0.0f;
  float std_test_acc = 0.0f;  // population convention
};

/// The grid per algorithm: lr in {1e-3,1e-4,1e-5} for all; gamma in {2,20,200}
/// for hsic; alpha in {1,0.1,0.01} for sigproptl. The winner (highest best
/// validation accuracy; ties to the smaller lr, then the first-listed
/// algorithm value) is re-run with `repeats` fresh seeds (base_seed + 0..R-1).
/// `lr_override` replaces the learning-rate grid when nonempty (smoke runs).
GridResult grid_search(const ExperimentConfig& base, const DataBundle& data, int repeats,
                       int grid_epochs, const std::vector<float>& lr_override = {});

std::vector<float> lr_grid();
std::vector<float> gamma_grid();
std::vector<float> alpha_grid();

// ---- reports ------------------------------------------------------------------

enum class ReportFormat { Csv, Json, Table };

/// Aggregated report over run records: mean (std) test accuracy per
/// (arch, algorithm, binarization) cell plus the retained-memory analogue.
/// Accuracy std uses the population convention. Deterministic byte-for-byte
/// for identical records; wall-clock times are included only when
/// `with_times` is set.
std::string report(const std::vector<RunRecord>& records, ReportFormat format,
                   bool with_times = false);

ArchId arch_from_name(const std::string& name);

}  // namespace bnn
