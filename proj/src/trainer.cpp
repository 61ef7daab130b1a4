#include "ocld/trainer.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include <json.hpp>

using nlohmann::json;

namespace ocld {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

Image draw_gauss(Rng& rng, int h, int w, int c) {
  Image out(h, w, c);
  for (double& v : out.data) v = rng.gauss();
  return out;
}

Image apply_latent_mask(const Image& values, const Mask& mask) {
  Image out = values;
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      if (!mask.at(y, x))
        for (int c = 0; c < out.channels; ++c) out.at(y, x, c) = 0.0;
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (n_train < 1) throw std::invalid_argument("config: n_train must be >= 1");
  if (n_ref < 0) throw std::invalid_argument("config: n_ref must be >= 0");
  if (lambda_rgb < 0 || lambda_depth < 0 || lambda_collab < 0 || lambda_geo < 0)
    throw std::invalid_argument("config: loss weights must be >= 0");
  if (!(0.0 < t_min && t_min < t_max && t_max < 1.0))
    throw std::invalid_argument("config: requires 0 < t_min < t_max < 1");
  if (grid_rows < 1 || grid_cols < 1)
    throw std::invalid_argument("config: grid layout must be >= 1x1");
  if (grid_passes < 1) throw std::invalid_argument("config: grid_passes must be >= 1");
  if (max_iter < 0) throw std::invalid_argument("config: max_iter must be >= 0");
  if (learning_rate <= 0) throw std::invalid_argument("config: learning_rate must be > 0");
  if (n_samples < 2) throw std::invalid_argument("config: n_samples must be >= 2");
  if (ray_batch < 1) throw std::invalid_argument("config: ray_batch must be >= 1");
  if (field_resolution < 2)
    throw std::invalid_argument("config: field_resolution must be >= 2");
  if (weight_fn != "sigma-squared" && weight_fn != "constant")
    throw std::invalid_argument("config: weight_fn must be sigma-squared or constant");
}

WeightFn TrainConfig::weight() const {
  WeightFn w;
  w.kind = weight_fn == "constant" ? WeightFn::Kind::kConstant
                                   : WeightFn::Kind::kSigmaSquared;
  w.schedule = schedule();
  return w;
}

int TrainConfig::effective_threads() const {
  if (threads > 0) return threads;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

std::string TrainConfig::canonical_string() const {
  std::map<std::string, std::string> kv = {
      {"lambda_rgb", fmt_double(lambda_rgb)},
      {"lambda_depth", fmt_double(lambda_depth)},
      {"lambda_collab", fmt_double(lambda_collab)},
      {"lambda_geo", fmt_double(lambda_geo)},
      {"n_train", std::to_string(n_train)},
      {"n_ref", std::to_string(n_ref)},
      {"grid_rows", std::to_string(grid_rows)},
      {"grid_cols", std::to_string(grid_cols)},
      {"grid_passes", std::to_string(grid_passes)},
      {"guidance", fmt_double(guidance)},
      {"t_min", fmt_double(t_min)},
      {"t_max", fmt_double(t_max)},
      {"max_iter", std::to_string(max_iter)},
      {"learning_rate", fmt_double(learning_rate)},
      {"n_samples", std::to_string(n_samples)},
      {"ray_batch", std::to_string(ray_batch)},
      {"seed", std::to_string(seed)},
      {"denoiser", denoiser},
      {"weight_fn", weight_fn},
      {"field_resolution", std::to_string(field_resolution)},
      {"density_init", fmt_double(density_init)},
      {"no_cds", no_cds ? "1" : "0"},
      {"no_grid", no_grid ? "1" : "0"},
      {"no_ref", no_ref ? "1" : "0"},
  };
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("config parse error: ") + e.what());
  }
  RunConfig rc;
  TrainConfig& t = rc.train;
  const std::map<std::string, std::function<void(const json&)>> setters = {
      {"lambda_rgb", [&](const json& v) { t.lambda_rgb = v.get<double>(); }},
      {"lambda_depth", [&](const json& v) { t.lambda_depth = v.get<double>(); }},
      {"lambda_collab", [&](const json& v) { t.lambda_collab = v.get<double>(); }},
      {"lambda_geo", [&](const json& v) { t.lambda_geo = v.get<double>(); }},
      {"n_train", [&](const json& v) { t.n_train = v.get<int>(); }},
      {"n_ref", [&](const json& v) { t.n_ref = v.get<int>(); }},
      {"grid_rows", [&](const json& v) { t.grid_rows = v.get<int>(); }},
      {"grid_cols", [&](const json& v) { t.grid_cols = v.get<int>(); }},
      {"grid_passes", [&](const json& v) { t.grid_passes = v.get<int>(); }},
      {"guidance", [&](const json& v) { t.guidance = v.get<double>(); }},
      {"t_min", [&](const json& v) { t.t_min = v.get<double>(); }},
      {"t_max", [&](const json& v) { t.t_max = v.get<double>(); }},
      {"max_iter", [&](const json& v) { t.max_iter = v.get<int>(); }},
      {"learning_rate", [&](const json& v) { t.learning_rate = v.get<double>(); }},
      {"n_samples", [&](const json& v) { t.n_samples = v.get<int>(); }},
      {"ray_batch", [&](const json& v) { t.ray_batch = v.get<int>(); }},
      {"seed", [&](const json& v) { t.seed = v.get<uint64_t>(); }},
      {"denoiser", [&](const json& v) { t.denoiser = v.get<std::string>(); }},
      {"weight_fn", [&](const json& v) { t.weight_fn = v.get<std::string>(); }},
      {"field_resolution", [&](const json& v) { t.field_resolution = v.get<int>(); }},
      {"density_init", [&](const json& v) { t.density_init = v.get<double>(); }},
      {"threads", [&](const json& v) { t.threads = v.get<int>(); }},
      {"no_cds", [&](const json& v) { t.no_cds = v.get<bool>(); }},
      {"no_grid", [&](const json& v) { t.no_grid = v.get<bool>(); }},
      {"no_ref", [&](const json& v) { t.no_ref = v.get<bool>(); }},
      {"scene", [&](const json& v) { rc.scene = v.get<std::string>(); }},
      {"out_dir", [&](const json& v) { rc.out_dir = v.get<std::string>(); }},
  };
  for (auto it = j.begin(); it != j.end(); ++it) {
    auto setter = setters.find(it.key());
    if (setter == setters.end())
      throw std::runtime_error("config: unknown key '" + it.key() + "'");
    try {
      setter->second(it.value());
    } catch (const json::exception& e) {
      throw std::runtime_error("config: bad value for '" + it.key() + "': " + e.what());
    }
  }
  t.validate();
  return rc;
}

std::string run_config_to_json(const RunConfig& config) {
  const TrainConfig& t = config.train;
  json j = {
      {"lambda_rgb", t.lambda_rgb},
      {"lambda_depth", t.lambda_depth},
      {"lambda_collab", t.lambda_collab},
      {"lambda_geo", t.lambda_geo},
      {"n_train", t.n_train},
      {"n_ref", t.n_ref},
      {"grid_rows", t.grid_rows},
      {"grid_cols", t.grid_cols},
      {"grid_passes", t.grid_passes},
      {"guidance", t.guidance},
      {"t_min", t.t_min},
      {"t_max", t.t_max},
      {"max_iter", t.max_iter},
      {"learning_rate", t.learning_rate},
      {"n_samples", t.n_samples},
      {"ray_batch", t.ray_batch},
      {"seed", t.seed},
      {"denoiser", t.denoiser},
      {"weight_fn", t.weight_fn},
      {"field_resolution", t.field_resolution},
      {"density_init", t.density_init},
      {"threads", t.threads},
      {"no_cds", t.no_cds},
      {"no_grid", t.no_grid},
      {"no_ref", t.no_ref},
      {"scene", config.scene},
      {"out_dir", config.out_dir},
  };
  return j.dump(2) + "\n";
}

ViewSelection select_views(Rng& rng, int n_available, int n_train, int n_ref) {
  if (n_train < 1 || n_ref < 0)
    throw std::invalid_argument("select_views: bad set sizes");
  if (n_train + n_ref > n_available)
    throw std::invalid_argument("select_views: not enough views available");
  std::vector<int> ids(n_available);
  for (int i = 0; i < n_available; ++i) ids[i] = i;
  // Partial Fisher-Yates: the first n_train + n_ref slots are a uniform
  // draw without replacement.
  for (int i = 0; i < n_train + n_ref; ++i) {
    const int j = i + static_cast<int>(rng.uniform_int(n_available - i));
    std::swap(ids[i], ids[j]);
  }
  ViewSelection sel;
  sel.train_ids.assign(ids.begin(), ids.begin() + n_train);
  sel.ref_ids.assign(ids.begin() + n_train, ids.begin() + n_train + n_ref);
  return sel;
}

std::string reports_to_csv(const std::vector<LossReport>& reports) {
  std::string out = "iter,t,bg_rgb,bg_depth,collab_grad_norm,geo_grad_norm,flags\n";
  for (const LossReport& r : reports) {
    out += std::to_string(r.iter) + "," + fmt_double(r.t) + "," +
           fmt_double(r.bg_rgb) + "," + fmt_double(r.bg_depth) + "," +
           fmt_double(r.collab_grad_norm) + "," + fmt_double(r.geo_grad_norm) + ",";
    std::string flags;
    auto add_flag = [&flags](const char* f) {
      if (!flags.empty()) flags += ';';
      flags += f;
    };
    if (r.cds_bypassed) add_flag("cds-bypassed");
    if (r.empty_mask_warning) add_flag("empty-mask");
    if (r.geo_skipped) add_flag("geo-skipped");
    out += flags + "\n";
  }
  return out;
}

Latent encode_view(const Image& rgb, int view_id) {
  if (rgb.height % kPoolFactor != 0 || rgb.width % kPoolFactor != 0)
    throw std::invalid_argument("encode_view: image size not divisible by pool factor");
  const int lh = rgb.height / kPoolFactor;
  const int lw = rgb.width / kPoolFactor;
  Image z(lh, lw, rgb.channels);
  const double inv = 1.0 / (kPoolFactor * kPoolFactor);
  for (int y = 0; y < lh; ++y)
    for (int x = 0; x < lw; ++x)
      for (int c = 0; c < rgb.channels; ++c) {
        double s = 0.0;
        for (int dy = 0; dy < kPoolFactor; ++dy)
          for (int dx = 0; dx < kPoolFactor; ++dx)
            s += rgb.at(y * kPoolFactor + dy, x * kPoolFactor + dx, c);
        z.at(y, x, c) = 2.0 * (s * inv) - 1.0;
      }
  return Latent(std::move(z), view_id);
}

Image encode_transpose(const Image& d_latent, int height, int width) {
  if (height % kPoolFactor != 0 || width % kPoolFactor != 0 ||
      d_latent.height != height / kPoolFactor ||
      d_latent.width != width / kPoolFactor)
    throw std::invalid_argument("encode_transpose: shape mismatch");
  Image d_img(height, width, d_latent.channels);
  const double scale = 2.0 / (kPoolFactor * kPoolFactor);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < d_latent.channels; ++c)
        d_img.at(y, x, c) =
            scale * d_latent.at(y / kPoolFactor, x / kPoolFactor, c);
  return d_img;
}

Mask pool_mask_any(const Mask& mask) {
  if (mask.height % kPoolFactor != 0 || mask.width % kPoolFactor != 0)
    throw std::invalid_argument("pool_mask_any: size not divisible by pool factor");
  Mask out(mask.height / kPoolFactor, mask.width / kPoolFactor);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      bool any = false;
      for (int dy = 0; dy < kPoolFactor && !any; ++dy)
        for (int dx = 0; dx < kPoolFactor; ++dx)
          if (mask.at(y * kPoolFactor + dy, x * kPoolFactor + dx)) {
            any = true;
            break;
          }
      out.set(y, x, any);
    }
  return out;
}

BackgroundLoss background_loss(const RenderedView& rendered,
                               const MaskedView& gt, double lambda_rgb,
                               double lambda_depth) {
  require_same_shape(rendered.rgb, gt.rgb, "background_loss rgb");
  require_same_shape(rendered.depth, gt.depth, "background_loss depth");
  if (gt.mask.height != gt.rgb.height || gt.mask.width != gt.rgb.width)
    throw std::invalid_argument("background_loss: mask shape mismatch");

  BackgroundLoss out;
  out.grads.d_rgb = Image(gt.rgb.height, gt.rgb.width, 3);
  out.grads.d_depth = Image(gt.rgb.height, gt.rgb.width, 1);

  size_t unmasked = 0;
  for (int y = 0; y < gt.rgb.height; ++y)
    for (int x = 0; x < gt.rgb.width; ++x)
      if (!gt.mask.at(y, x)) ++unmasked;
  if (unmasked == 0) return out;
  const double inv = 1.0 / static_cast<double>(unmasked);

  for (int y = 0; y < gt.rgb.height; ++y) {
    for (int x = 0; x < gt.rgb.width; ++x) {
      if (gt.mask.at(y, x)) continue;
      for (int c = 0; c < 3; ++c) {
        const double d = rendered.rgb.at(y, x, c) - gt.rgb.at(y, x, c);
        out.rgb_loss += d * d * inv;
        out.grads.d_rgb.at(y, x, c) = 2.0 * lambda_rgb * d * inv;
      }
      if (rendered.opacity.at(y, x, 0) >= 0.5) {
        const double d = rendered.depth.at(y, x, 0) - gt.depth.at(y, x, 0);
        out.depth_loss += d * d * inv;
        out.grads.d_depth.at(y, x, 0) = 2.0 * lambda_depth * d * inv;
      }
    }
  }
  out.rgb_loss *= lambda_rgb;
  out.depth_loss *= lambda_depth;
  out.loss = out.rgb_loss + out.depth_loss;
  return out;
}

double cosine_lr(double base_lr, uint64_t step) {
  const double phase = static_cast<double>(step % 50) / 50.0;
  return base_lr * (1.0 + std::cos(M_PI * phase)) / 2.0;
}

void adam_cosine_update(OptimizerState& state, const FieldGrads& grads,
                        double base_lr, RadianceField& field) {
  if (state.m_rgb.size() != grads.rgb.size() ||
      state.m_density.size() != grads.density.size() ||
      field.rgb.size() != grads.rgb.size())
    throw std::invalid_argument("adam_cosine_update: shape mismatch");
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  const double lr = cosine_lr(base_lr, state.step);
  const uint64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));

  auto update = [&](std::vector<double>& m, std::vector<double>& v,
                    const std::vector<double>& g, std::vector<double>& p) {
    for (size_t i = 0; i < g.size(); ++i) {
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + kEps);
    }
  };
  update(state.m_rgb, state.v_rgb, grads.rgb, field.rgb);
  update(state.m_density, state.v_density, grads.density, field.density);
  state.step = t;
}

namespace {

struct ViewData {
  int global_id = 0;
  RenderedView rendered;
  Latent latent;       // encoded rendered rgb
  Image eps;           // drawn noise
  Latent noised;       // z_t
  Condition condition; // gt-context condition
  Mask latent_mask;
};

Condition make_rgb_condition(const MaskedView& view, const Mask& latent_mask,
                             const std::string& tag) {
  Image masked_rgb = view.rgb;
  for (int y = 0; y < masked_rgb.height; ++y)
    for (int x = 0; x < masked_rgb.width; ++x)
      if (view.mask.at(y, x))
        for (int c = 0; c < 3; ++c) masked_rgb.at(y, x, c) = 0.0;
  Latent ctx = encode_view(masked_rgb);
  return Condition(latent_mask, std::move(ctx.values), tag);
}

}  // namespace

StepResult collaborative_step(const RadianceField& field,
                              const Denoiser& denoiser,
                              const SceneBundle& scene,
                              const ViewSelection& selection,
                              const TrainConfig& config, int iter) {
  StepResult result;
  result.grads = FieldGrads(field);
  if (config.lambda_collab == 0.0) {
    result.skipped = true;
    return result;
  }

  const int n_threads = config.effective_threads();
  const double t = progressive_timestep(iter, config.max_iter > 0 ? config.max_iter : 1,
                                        config.t_min, config.t_max);
  const NoiseSchedule schedule = config.schedule();
  const WeightFn weight = config.weight();
  const std::vector<int>& ref_ids = config.no_ref ? std::vector<int>{} : selection.ref_ids;

  // Render and encode the selection; reference views carry no gradient taps.
  std::vector<ViewData> train_views(selection.train_ids.size());
  std::vector<ViewData> ref_views(ref_ids.size());
  auto prepare = [&](ViewData& vd, int global_id) {
    const MaskedView& mv = scene.train[global_id];
    vd.global_id = global_id;
    vd.rendered = render_view(field, mv.camera, config.n_samples,
                              view_render_seed(config.seed, iter, global_id),
                              n_threads);
    vd.latent = encode_view(vd.rendered.rgb, global_id);
    vd.latent_mask = pool_mask_any(mv.mask);
    vd.condition = make_rgb_condition(mv, vd.latent_mask, scene.tag);
  };
  for (size_t i = 0; i < selection.train_ids.size(); ++i)
    prepare(train_views[i], selection.train_ids[i]);
  for (size_t i = 0; i < ref_ids.size(); ++i)
    prepare(ref_views[i], ref_ids[i]);

  bool any_mask = false;
  for (const ViewData& vd : train_views)
    if (vd.latent_mask.any()) any_mask = true;
  if (!any_mask) {
    result.empty_mask = true;
    return result;
  }

  // Per-view noise draws, training views first, then references.
  Rng noise_rng(stream_seed(config.seed, iter, Stream::kCollabNoise));
  for (ViewData& vd : train_views) {
    vd.eps = draw_gauss(noise_rng, vd.latent.values.height,
                        vd.latent.values.width, vd.latent.values.channels);
    vd.noised = add_noise(vd.latent, vd.eps, t, schedule);
  }
  for (ViewData& vd : ref_views) {
    vd.eps = draw_gauss(noise_rng, vd.latent.values.height,
                        vd.latent.values.width, vd.latent.values.channels);
    vd.noised = add_noise(vd.latent, vd.eps, t, schedule);
  }

  // Grid-denoise with CFG. Twin generators keep the conditional and
  // unconditional passes on identical grid assignments.
  const int n_train = static_cast<int>(train_views.size());
  std::vector<NoiseTensor> eps_hat(n_train);
  if (config.no_grid) {
    for (int i = 0; i < n_train; ++i) {
      const NoiseTensor uncond = denoiser.predict(
          train_views[i].noised.values, t, train_views[i].condition, false);
      const NoiseTensor cond = denoiser.predict(
          train_views[i].noised.values, t, train_views[i].condition, true);
      eps_hat[i] = cfg_combine(uncond, cond, config.guidance);
    }
  } else {
    std::vector<Latent> train_zt, ref_zt;
    std::vector<Condition> pool_conditions;
    for (const ViewData& vd : train_views) {
      train_zt.push_back(vd.noised);
      pool_conditions.push_back(vd.condition);
    }
    for (const ViewData& vd : ref_views) {
      ref_zt.push_back(vd.noised);
      pool_conditions.push_back(vd.condition);
    }
    GridLayout layout;
    layout.rows = config.grid_rows;
    layout.cols = config.grid_cols;
    layout.tile_h = train_zt[0].values.height;
    layout.tile_w = train_zt[0].values.width;
    layout.tile_c = train_zt[0].values.channels;
    const uint64_t grid_seed = stream_seed(config.seed, iter, Stream::kCollabGrids);
    Rng rng_uncond(grid_seed);
    Rng rng_cond(grid_seed);
    const std::vector<NoiseTensor> uncond = shuffled_grid_predict(
        denoiser, train_zt, ref_zt, pool_conditions, t, layout,
        config.grid_passes, rng_uncond, false);
    const std::vector<NoiseTensor> cond = shuffled_grid_predict(
        denoiser, train_zt, ref_zt, pool_conditions, t, layout,
        config.grid_passes, rng_cond, true);
    for (int i = 0; i < n_train; ++i)
      eps_hat[i] = cfg_combine(uncond[i], cond[i], config.guidance);
  }

  // Masked residuals; the kernel itself is computed over full latents.
  std::vector<Latent> noised_train;
  std::vector<NoiseTensor> masked_pred, masked_eps;
  for (int i = 0; i < n_train; ++i) {
    noised_train.push_back(train_views[i].noised);
    masked_pred.push_back(apply_latent_mask(eps_hat[i], train_views[i].latent_mask));
    masked_eps.push_back(apply_latent_mask(train_views[i].eps, train_views[i].latent_mask));
  }

  std::vector<Image> latent_grads(n_train);
  if (config.no_cds) {
    for (int i = 0; i < n_train; ++i)
      latent_grads[i] = sds_latent_grad(masked_pred[i], masked_eps[i], t, weight);
  } else {
    const double h = n_train >= 2 ? median_bandwidth(noised_train) : 1.0;
    latent_grads =
        cds_latent_grads(noised_train, masked_pred, masked_eps, t, weight, h);
    // The repulsion term reaches outside the inpainting region; restrict
    // every contribution to the view's own latent mask.
    for (int i = 0; i < n_train; ++i)
      latent_grads[i] = apply_latent_mask(latent_grads[i], train_views[i].latent_mask);
  }

  // Chain dz/dx (encoder transpose) and dx/dtheta (renderer adjoint).
  const int height = scene.train[0].rgb.height;
  const int width = scene.train[0].rgb.width;
  for (int i = 0; i < n_train; ++i) {
    PixelGrads upstream;
    upstream.d_rgb = encode_transpose(config.lambda_collab * latent_grads[i],
                                      height, width);
    upstream.d_depth = Image(height, width, 1);
    const FieldGrads view_grads = render_view_with_grad(
        field, scene.train[train_views[i].global_id].camera, config.n_samples,
        upstream, view_render_seed(config.seed, iter, train_views[i].global_id),
        n_threads);
    result.grads.add(view_grads);
  }
  result.grad_norm = std::sqrt(result.grads.squared_norm());
  return result;
}

StepResult geometry_step(const RadianceField& field, const Denoiser& denoiser,
                         const SceneBundle& scene, int view_id,
                         const TrainConfig& config, int iter) {
  StepResult result;
  result.grads = FieldGrads(field);
  if (config.lambda_geo == 0.0) {
    result.skipped = true;
    return result;
  }

  const MaskedView& mv = scene.train[view_id];
  const int n_threads = config.effective_threads();
  const double t = progressive_timestep(iter, config.max_iter > 0 ? config.max_iter : 1,
                                        config.t_min, config.t_max);
  const NoiseSchedule schedule = config.schedule();

  const RenderedView rendered =
      render_view(field, mv.camera, config.n_samples,
                  view_render_seed(config.seed, iter, view_id), n_threads);
  const NormalMap nm = normal_from_depth(rendered.depth, mv.camera);

  bool valid_masked = false;
  for (int y = 0; y < mv.mask.height && !valid_masked; ++y)
    for (int x = 0; x < mv.mask.width; ++x)
      if (mv.mask.at(y, x) && nm.valid.at(y, x)) {
        valid_masked = true;
        break;
      }
  if (!valid_masked) {
    result.empty_mask = true;
    return result;
  }

  // Normal map as a [0,1] image; invalid pixels sit at the midpoint.
  const int height = mv.rgb.height, width = mv.rgb.width;
  Image n_img(height, width, 3, 0.5);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (nm.valid.at(y, x))
        for (int c = 0; c < 3; ++c)
          n_img.at(y, x, c) = (nm.normals.at(y, x, c) + 1.0) / 2.0;

  const Mask latent_mask = pool_mask_any(mv.mask);

  // Condition: normal map of the observed depth, masked region removed.
  const NormalMap nm_gt = normal_from_depth(mv.depth, mv.camera);
  Image ctx_img(height, width, 3, 0.5);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      if (mv.mask.at(y, x)) {
        for (int c = 0; c < 3; ++c) ctx_img.at(y, x, c) = 0.0;
      } else if (nm_gt.valid.at(y, x)) {
        for (int c = 0; c < 3; ++c)
          ctx_img.at(y, x, c) = (nm_gt.normals.at(y, x, c) + 1.0) / 2.0;
      }
    }
  const Condition condition(latent_mask, encode_view(ctx_img).values, scene.tag);

  const Latent z_n = encode_view(n_img, view_id);
  Rng rng(stream_seed(config.seed, iter, Stream::kGeometry));
  const Image eps = draw_gauss(rng, z_n.values.height, z_n.values.width,
                               z_n.values.channels);
  const Latent z_t = add_noise(z_n, eps, t, schedule);

  const NoiseTensor uncond = denoiser.predict(z_t.values, t, condition, false);
  const NoiseTensor cond = denoiser.predict(z_t.values, t, condition, true);
  const NoiseTensor pred = cfg_combine(uncond, cond, config.guidance);

  const Image residual =
      apply_latent_mask(pred - eps, latent_mask);
  const Image latent_grad = config.weight()(t) * residual;

  // Chain dz/dn, dn/ddepth and the depth adjoint.
  Image d_nimg = encode_transpose(config.lambda_geo * latent_grad, height, width);
  Image d_normals(height, width, 3);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (nm.valid.at(y, x))
        for (int c = 0; c < 3; ++c)
          d_normals.at(y, x, c) = 0.5 * d_nimg.at(y, x, c);
  PixelGrads upstream;
  upstream.d_rgb = Image(height, width, 3);
  upstream.d_depth = normal_from_depth_backward(rendered.depth, mv.camera, d_normals);
  result.grads = render_view_with_grad(
      field, mv.camera, config.n_samples, upstream,
      view_render_seed(config.seed, iter, view_id), n_threads);
  result.grad_norm = std::sqrt(result.grads.squared_norm());
  return result;
}

BackgroundBatch background_ray_batch(const RadianceField& field,
                                     const SceneBundle& scene,
                                     const TrainConfig& config, int iter) {
  BackgroundBatch out;
  out.grads = FieldGrads(field);
  const int n_threads = config.effective_threads();

  Rng rng(stream_seed(config.seed, iter, Stream::kBackground));
  struct Sample {
    int view;
    int pixel;
  };
  std::vector<Sample> batch;
  batch.reserve(config.ray_batch);
  const int n_views = static_cast<int>(scene.train.size());
  for (int k = 0; k < config.ray_batch; ++k) {
    const int v = static_cast<int>(rng.uniform_int(n_views));
    const MaskedView& mv = scene.train[v];
    const int p = static_cast<int>(rng.uniform_int(
        static_cast<uint64_t>(mv.rgb.width) * mv.rgb.height));
    if (mv.mask.at(p / mv.rgb.width, p % mv.rgb.width)) continue;  // masked out
    batch.push_back({v, p});
  }
  if (batch.empty()) return out;
  const double inv = 1.0 / static_cast<double>(batch.size());

  struct RayOut {
    RaySample sample;
    bool hit = false;
  };
  std::vector<RayOut> rendered(batch.size());
  parallel_for_ranges(static_cast<int>(batch.size()), n_threads, [&](int lo, int hi) {
    for (int i = lo; i < hi; ++i) {
      const MaskedView& mv = scene.train[batch[i].view];
      const int y = batch[i].pixel / mv.rgb.width;
      const int x = batch[i].pixel % mv.rgb.width;
      Ray ray = mv.camera.pixel_ray(x, y);
      if (!clip_ray_to_bbox(ray, field.bbox_min, field.bbox_max)) continue;
      rendered[i].sample = render_ray(
          field, ray, config.n_samples,
          derive_seed(view_render_seed(config.seed, iter, batch[i].view),
                      batch[i].pixel));
      rendered[i].hit = true;
    }
  });

  // Loss and upstream gradients per sampled ray (mean over the batch).
  std::vector<PixelGrads> upstreams;  // one sparse image per touched view
  std::map<int, size_t> view_slot;
  for (size_t i = 0; i < batch.size(); ++i) {
    const MaskedView& mv = scene.train[batch[i].view];
    const int y = batch[i].pixel / mv.rgb.width;
    const int x = batch[i].pixel % mv.rgb.width;
    const RayOut& r = rendered[i];
    auto [it, inserted] = view_slot.try_emplace(batch[i].view, upstreams.size());
    if (inserted) {
      PixelGrads pg;
      pg.d_rgb = Image(mv.rgb.height, mv.rgb.width, 3);
      pg.d_depth = Image(mv.rgb.height, mv.rgb.width, 1);
      upstreams.push_back(std::move(pg));
    }
    PixelGrads& pg = upstreams[it->second];
    for (int c = 0; c < 3; ++c) {
      const double rendered_c = r.hit ? r.sample.color[c] : 0.0;
      const double d = rendered_c - mv.rgb.at(y, x, c);
      out.rgb_loss += config.lambda_rgb * d * d * inv;
      pg.d_rgb.at(y, x, c) += 2.0 * config.lambda_rgb * d * inv;
    }
    const double opacity = r.hit ? 1.0 - r.sample.transmittance : 0.0;
    if (opacity >= 0.5) {
      const double d = r.sample.depth - mv.depth.at(y, x, 0);
      out.depth_loss += config.lambda_depth * d * d * inv;
      pg.d_depth.at(y, x, 0) += 2.0 * config.lambda_depth * d * inv;
    }
  }

  for (const auto& [view, slot] : view_slot) {
    const FieldGrads g = render_view_with_grad(
        field, scene.train[view].camera, config.n_samples, upstreams[slot],
        view_render_seed(config.seed, iter, view), n_threads);
    out.grads.add(g);
  }
  return out;
}

namespace {

void validate_against_scene(const TrainConfig& config, const SceneBundle& scene) {
  config.validate();
  if (config.n_train + config.n_ref > static_cast<int>(scene.train.size()))
    throw std::invalid_argument("config: scene has fewer views than n_train + n_ref");
  if (scene.train[0].rgb.height % kPoolFactor != 0 ||
      scene.train[0].rgb.width % kPoolFactor != 0)
    throw std::invalid_argument("config: render size must be divisible by the pool factor");
  if (config.lambda_collab > 0.0 && !config.no_grid) {
    const int pool = config.n_train + (config.no_ref ? 0 : config.n_ref);
    if (pool < config.grid_rows * config.grid_cols)
      throw std::invalid_argument("config: view pool smaller than the grid layout");
  }
  DenoiserRegistry::create(config.denoiser, config.schedule());  // name check
}

}  // namespace

void train_loop(const SceneBundle& scene, const TrainConfig& config,
                RadianceField& field, OptimizerState& optimizer, int start_iter,
                int end_iter, std::vector<LossReport>& reports) {
  validate_against_scene(config, scene);
  if (end_iter < 0 || end_iter > config.max_iter) end_iter = config.max_iter;
  const auto denoiser = DenoiserRegistry::create(config.denoiser, config.schedule());

  for (int iter = start_iter; iter < end_iter; ++iter) {
    Rng select_rng(stream_seed(config.seed, iter, Stream::kSelect));
    const ViewSelection selection =
        select_views(select_rng, static_cast<int>(scene.train.size()),
                     config.n_train, config.n_ref);
    const int geo_view = selection.train_ids[static_cast<size_t>(
        select_rng.uniform_int(selection.train_ids.size()))];

    LossReport report;
    report.iter = iter;
    report.t = progressive_timestep(iter, config.max_iter, config.t_min, config.t_max);

    const BackgroundBatch bg = background_ray_batch(field, scene, config, iter);
    report.bg_rgb = bg.rgb_loss;
    report.bg_depth = bg.depth_loss;

    StepResult collab =
        collaborative_step(field, *denoiser, scene, selection, config, iter);
    report.collab_grad_norm = collab.grad_norm;
    report.cds_bypassed = config.no_cds;
    report.empty_mask_warning = collab.empty_mask;

    StepResult geo = geometry_step(field, *denoiser, scene, geo_view, config, iter);
    report.geo_grad_norm = geo.grad_norm;
    report.geo_skipped = geo.skipped || geo.empty_mask;

    FieldGrads total = bg.grads;
    total.add(collab.grads);
    total.add(geo.grads);
    adam_cosine_update(optimizer, total, config.learning_rate, field);
    reports.push_back(report);
  }
}

TrainResult train(const SceneBundle& scene, const TrainConfig& config) {
  validate_against_scene(config, scene);
  TrainResult result;
  result.field = RadianceField(config.field_resolution, config.field_resolution,
                               config.field_resolution, scene.bbox_min,
                               scene.bbox_max, 0.0, config.density_init);
  result.optimizer = OptimizerState(result.field);
  train_loop(scene, config, result.field, result.optimizer, 0, -1, result.reports);
  return result;
}

// --- checkpoint io --------------------------------------------------------

namespace {

constexpr char kMagic[5] = {'O', 'C', 'L', 'D', '1'};

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::istream& in, T* v) {
  in.read(reinterpret_cast<char*>(v), sizeof(T));
}

void write_vec(std::ostream& out, const std::vector<double>& v) {
  write_pod(out, static_cast<uint64_t>(v.size()));
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> read_vec(std::istream& in) {
  uint64_t n = 0;
  read_pod(in, &n);
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(kMagic, sizeof(kMagic));
  write_pod(out, ckpt.config_hash);
  write_pod(out, ckpt.iteration);
  write_pod(out, static_cast<uint32_t>(ckpt.field.res_x));
  write_pod(out, static_cast<uint32_t>(ckpt.field.res_y));
  write_pod(out, static_cast<uint32_t>(ckpt.field.res_z));
  for (int a = 0; a < 3; ++a) write_pod(out, ckpt.field.bbox_min[a]);
  for (int a = 0; a < 3; ++a) write_pod(out, ckpt.field.bbox_max[a]);
  write_vec(out, ckpt.field.rgb);
  write_vec(out, ckpt.field.density);
  write_pod(out, ckpt.optimizer.step);
  write_vec(out, ckpt.optimizer.m_rgb);
  write_vec(out, ckpt.optimizer.v_rgb);
  write_vec(out, ckpt.optimizer.m_density);
  write_vec(out, ckpt.optimizer.v_density);
  if (!out) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing checkpoint: " + path);
  char magic[5];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("bad checkpoint magic: " + path);
  Checkpoint ckpt;
  read_pod(in, &ckpt.config_hash);
  read_pod(in, &ckpt.iteration);
  uint32_t rx = 0, ry = 0, rz = 0;
  read_pod(in, &rx);
  read_pod(in, &ry);
  read_pod(in, &rz);
  ckpt.field.res_x = static_cast<int>(rx);
  ckpt.field.res_y = static_cast<int>(ry);
  ckpt.field.res_z = static_cast<int>(rz);
  for (int a = 0; a < 3; ++a) read_pod(in, &ckpt.field.bbox_min[a]);
  for (int a = 0; a < 3; ++a) read_pod(in, &ckpt.field.bbox_max[a]);
  ckpt.field.rgb = read_vec(in);
  ckpt.field.density = read_vec(in);
  read_pod(in, &ckpt.optimizer.step);
  ckpt.optimizer.m_rgb = read_vec(in);
  ckpt.optimizer.v_rgb = read_vec(in);
  ckpt.optimizer.m_density = read_vec(in);
  ckpt.optimizer.v_density = read_vec(in);
  if (!in) throw std::runtime_error("truncated checkpoint: " + path);
  if (ckpt.field.rgb.size() != ckpt.field.node_count() * 3 ||
      ckpt.field.density.size() != ckpt.field.node_count())
    throw std::runtime_error("corrupt checkpoint: " + path);
  return ckpt;
}

}  // namespace ocld
