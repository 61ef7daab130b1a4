#pragma once

#include "ocld/griddle.hpp"
#include "ocld/kernel.hpp"
#include "ocld/scenes.hpp"

namespace ocld {

struct TrainConfig {
  double lambda_rgb = 1.0;     // background color loss weight
  double lambda_depth = 0.1;   // background depth loss weight
  double lambda_collab = 1.0;  // collaborative distillation weight
  double lambda_geo = 0.1;     // geometry distillation weight
  int n_train = 12;
  int n_ref = 48;
  int grid_rows = 2;
  int grid_cols = 2;
  int grid_passes = 4;  // M
  double guidance = 7.5;
  double t_min = 0.02;
  double t_max = 0.98;
  int max_iter = 3000;
  double learning_rate = 1e-4;
  int n_samples = 64;
  int ray_batch = 1024;
  uint64_t seed = 0;
  std::string denoiser = "context-pull";
  std::string weight_fn = "sigma-squared";  // or "constant"
  int field_resolution = 32;
  double density_init = -2.0;
  int threads = 0;  // 0 = hardware concurrency; not part of the config hash
  // Ablation switches (Table-style rows): per-view SDS instead of CDS,
  // per-view denoising instead of grids, no reference views.
  bool no_cds = false;
  bool no_grid = false;
  bool no_ref = false;

  void validate() const;
  NoiseSchedule schedule() const { return NoiseSchedule{t_min, t_max}; }
  WeightFn weight() const;
  int effective_threads() const;
  // Canonical key=value serialization (threads excluded) and its FNV-1a hash.
  std::string canonical_string() const;
  uint64_t hash() const { return fnv1a64(canonical_string()); }
};

// Run configuration file: TrainConfig plus paths. Unknown keys are rejected.
struct RunConfig {
  TrainConfig train;
  std::string scene;
  std::string out_dir;
};

RunConfig parse_run_config(const std::string& json_text);
std::string run_config_to_json(const RunConfig& config);

struct ViewSelection {
  std::vector<int> train_ids;
  std::vector<int> ref_ids;
};

// Uniform sampling without replacement into disjoint train/ref sets.
ViewSelection select_views(Rng& rng, int n_available, int n_train, int n_ref);

struct LossReport {
  int iter = 0;
  double t = 0.0;
  double bg_rgb = 0.0;
  double bg_depth = 0.0;
  double collab_grad_norm = 0.0;
  double geo_grad_norm = 0.0;
  bool cds_bypassed = false;
  bool empty_mask_warning = false;
  bool geo_skipped = false;
};

std::string reports_to_csv(const std::vector<LossReport>& reports);

// Fixed 4x4 average pooling followed by the affine map [0,1] -> [-1,1].
// The exact transpose backs the dz/dx factor of the distillation chain.
constexpr int kPoolFactor = 4;
Latent encode_view(const Image& rgb, int view_id = -1);
Image encode_transpose(const Image& d_latent, int height, int width);
Mask pool_mask_any(const Mask& mask);

struct BackgroundLoss {
  double loss = 0.0;
  double rgb_loss = 0.0;
  double depth_loss = 0.0;
  PixelGrads grads;
};

// lambda1 ||rgb - gt||^2 + lambda2 ||depth - gt||^2 over unmasked pixels
// (mean reduction); depth terms are dropped where rendered opacity < 0.5.
BackgroundLoss background_loss(const RenderedView& rendered,
                               const MaskedView& gt, double lambda_rgb,
                               double lambda_depth);

// Adam moments plus the cosine-annealing phase (period 50, min rate 0).
struct OptimizerState {
  std::vector<double> m_rgb, v_rgb, m_density, v_density;
  uint64_t step = 0;

  OptimizerState() = default;
  explicit OptimizerState(const RadianceField& f)
      : m_rgb(f.node_count() * 3, 0.0),
        v_rgb(f.node_count() * 3, 0.0),
        m_density(f.node_count(), 0.0),
        v_density(f.node_count(), 0.0) {}
};

double cosine_lr(double base_lr, uint64_t step);
void adam_cosine_update(OptimizerState& state, const FieldGrads& grads,
                        double base_lr, RadianceField& field);

// Deterministic per-iteration seed streams; exposed so tests can replay the
// exact draws of the training steps.
enum class Stream : uint64_t {
  kSelect = 1,
  kBackground = 2,
  kCollabNoise = 3,
  kCollabGrids = 4,
  kGeometry = 5,
  kRender = 6,
};
inline uint64_t stream_seed(uint64_t config_seed, int iter, Stream s) {
  return derive_seed(config_seed, static_cast<uint64_t>(s), static_cast<uint64_t>(iter));
}
inline uint64_t view_render_seed(uint64_t config_seed, int iter, int view_id) {
  return derive_seed(stream_seed(config_seed, iter, Stream::kRender),
                     static_cast<uint64_t>(view_id));
}

struct StepResult {
  FieldGrads grads;
  double grad_norm = 0.0;
  bool empty_mask = false;
  bool skipped = false;
};

// Background reconstruction over a random ray batch drawn across all scene
// training views; masked pixels are skipped and the loss is averaged over
// the batch's unmasked rays.
struct BackgroundBatch {
  FieldGrads grads;
  double rgb_loss = 0.0;
  double depth_loss = 0.0;
};

BackgroundBatch background_ray_batch(const RadianceField& field,
                                     const SceneBundle& scene,
                                     const TrainConfig& config, int iter);

// One collaborative multi-view distillation step: renders the selection,
// encodes, noises, denoises through shuffled grids with CFG, couples the
// masked residuals with the train-view kernel and chains the latent
// gradients through the encoder transpose and the renderer adjoint.
StepResult collaborative_step(const RadianceField& field,
                              const Denoiser& denoiser,
                              const SceneBundle& scene,
                              const ViewSelection& selection,
                              const TrainConfig& config, int iter);

// Single-view vanilla SDS on the normal map derived from rendered depth.
StepResult geometry_step(const RadianceField& field, const Denoiser& denoiser,
                         const SceneBundle& scene, int view_id,
                         const TrainConfig& config, int iter);

struct TrainResult {
  RadianceField field;
  OptimizerState optimizer;
  std::vector<LossReport> reports;
};

TrainResult train(const SceneBundle& scene, const TrainConfig& config);

// Runs iterations [start_iter, end_iter) of the schedule defined by
// config.max_iter; end_iter = -1 means config.max_iter. Randomness is
// derived per iteration, so a resumed run reproduces an uninterrupted one
// exactly.
void train_loop(const SceneBundle& scene, const TrainConfig& config,
                RadianceField& field, OptimizerState& optimizer, int start_iter,
                int end_iter, std::vector<LossReport>& reports);

// Versioned binary checkpoint, magic "OCLD1".
struct Checkpoint {
  uint64_t config_hash = 0;
  uint64_t iteration = 0;
  RadianceField field;
  OptimizerState optimizer;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ocld
