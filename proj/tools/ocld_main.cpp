#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "ocld/image_io.hpp"
#include "ocld/metrics.hpp"
#include "ocld/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read: " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write: " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path);
}

ocld::SynthSpec parse_synth_spec(const std::string& text) {
  json j = json::parse(text);
  ocld::SynthSpec spec;
  const std::map<std::string, std::function<void(const json&)>> setters = {
      {"width", [&](const json& v) { spec.width = v.get<int>(); }},
      {"height", [&](const json& v) { spec.height = v.get<int>(); }},
      {"n_train", [&](const json& v) { spec.n_train = v.get<int>(); }},
      {"n_test", [&](const json& v) { spec.n_test = v.get<int>(); }},
      {"severity", [&](const json& v) { spec.severity = v.get<double>(); }},
      {"occluder", [&](const json& v) { spec.occluder = v.get<bool>(); }},
      {"fov_deg", [&](const json& v) { spec.fov_deg = v.get<double>(); }},
      {"dilate_kernel", [&](const json& v) { spec.dilate_kernel = v.get<int>(); }},
      {"dilate_iters", [&](const json& v) { spec.dilate_iters = v.get<int>(); }},
      {"tag", [&](const json& v) { spec.tag = v.get<std::string>(); }},
  };
  for (auto it = j.begin(); it != j.end(); ++it) {
    auto s = setters.find(it.key());
    if (s == setters.end())
      throw std::runtime_error("scene spec: unknown key '" + it.key() + "'");
    s->second(it.value());
  }
  return spec;
}

int cmd_gen_scene(const std::string& spec_path, const std::string& out_dir,
                  uint64_t seed) {
  ocld::SynthSpec spec;
  if (!spec_path.empty()) spec = parse_synth_spec(read_file(spec_path));
  ocld::Rng rng(seed);
  const ocld::SceneBundle bundle = ocld::synth_scene(spec, rng);
  ocld::save_scene(bundle, out_dir);
  std::cout << "scene written to " << out_dir << " (" << bundle.train.size()
            << " train / " << bundle.test.size() << " test views)\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& resume_path,
              int stop_after, const std::optional<uint64_t>& seed_override,
              const std::string& out_override, int threads_override,
              bool no_cds, bool no_grid, bool no_ref) {
  ocld::RunConfig rc = ocld::parse_run_config(read_file(config_path));
  if (seed_override) rc.train.seed = *seed_override;
  if (!out_override.empty()) rc.out_dir = out_override;
  if (threads_override > 0) rc.train.threads = threads_override;
  if (no_cds) rc.train.no_cds = true;
  if (no_grid) rc.train.no_grid = true;
  if (no_ref) rc.train.no_ref = true;
  if (rc.scene.empty()) throw std::runtime_error("config: 'scene' is required");
  if (rc.out_dir.empty()) throw std::runtime_error("config: 'out_dir' is required");

  const ocld::SceneBundle scene = ocld::load_scene(rc.scene);
  fs::create_directories(rc.out_dir);

  ocld::RadianceField field;
  ocld::OptimizerState optimizer;
  int start_iter = 0;
  if (!resume_path.empty()) {
    ocld::Checkpoint ckpt = ocld::load_checkpoint(resume_path);
    if (ckpt.config_hash != rc.train.hash())
      throw std::runtime_error("resume: checkpoint config hash does not match");
    field = std::move(ckpt.field);
    optimizer = std::move(ckpt.optimizer);
    start_iter = static_cast<int>(ckpt.iteration);
  } else {
    field = ocld::RadianceField(rc.train.field_resolution, rc.train.field_resolution,
                                rc.train.field_resolution, scene.bbox_min,
                                scene.bbox_max, 0.0, rc.train.density_init);
    optimizer = ocld::OptimizerState(field);
  }

  const int end_iter = stop_after > 0 ? std::min(stop_after, rc.train.max_iter) : -1;
  std::vector<ocld::LossReport> reports;
  ocld::train_loop(scene, rc.train, field, optimizer, start_iter, end_iter, reports);

  ocld::Checkpoint ckpt;
  ckpt.config_hash = rc.train.hash();
  ckpt.iteration = optimizer.step;
  ckpt.field = std::move(field);
  ckpt.optimizer = std::move(optimizer);
  const std::string ckpt_path = (fs::path(rc.out_dir) / "checkpoint.bin").string();
  ocld::save_checkpoint(ckpt_path, ckpt);

  const std::string csv_path = (fs::path(rc.out_dir) / "loss_log.csv").string();
  const std::string csv = ocld::reports_to_csv(reports);
  if (start_iter > 0 && fs::exists(csv_path)) {
    // Drop the header when appending to a resumed log.
    std::ofstream out(csv_path, std::ios::binary | std::ios::app);
    out << csv.substr(csv.find('\n') + 1);
  } else {
    write_file(csv_path, csv);
  }
  write_file((fs::path(rc.out_dir) / "config.json").string(),
             ocld::run_config_to_json(rc));
  std::cout << "checkpoint written to " << ckpt_path << " after "
            << ckpt.iteration << " iterations\n";
  return 0;
}

int cmd_render(const std::string& ckpt_path, const std::string& scene_dir,
               const std::string& split, const std::string& out_dir,
               uint64_t seed, int n_samples, int threads) {
  if (threads <= 0) {
    const unsigned hw = std::thread::hardware_concurrency();
    threads = hw == 0 ? 1 : static_cast<int>(hw);
  }
  const ocld::Checkpoint ckpt = ocld::load_checkpoint(ckpt_path);
  const ocld::SceneBundle scene = ocld::load_scene(scene_dir);
  if (split != "train" && split != "test")
    throw std::runtime_error("render: split must be 'train' or 'test'");
  fs::create_directories(out_dir);

  std::vector<ocld::Camera> cameras;
  if (split == "train")
    for (const auto& v : scene.train) cameras.push_back(v.camera);
  else
    for (const auto& v : scene.test) cameras.push_back(v.camera);

  for (size_t i = 0; i < cameras.size(); ++i) {
    const ocld::RenderedView view =
        ocld::render_view(ckpt.field, cameras[i], n_samples,
                          ocld::derive_seed(seed, i), threads);
    char stem[32];
    std::snprintf(stem, sizeof(stem), "%04zu", i);
    ocld::save_png_rgb((fs::path(out_dir) / (std::string(stem) + ".rgb.png")).string(),
                       view.rgb);
    ocld::save_depth_raw(
        (fs::path(out_dir) / (std::string(stem) + ".depth.raw")).string(),
        view.depth);
  }
  json info = {{"config_hash", ckpt.config_hash},
               {"split", split},
               {"count", cameras.size()},
               {"n_samples", n_samples},
               {"seed", seed}};
  write_file((fs::path(out_dir) / "render_info.json").string(), info.dump(2) + "\n");
  std::cout << "rendered " << cameras.size() << " views to " << out_dir << "\n";
  return 0;
}

int cmd_eval(const std::string& renders_dir, const std::string& scene_dir,
             const std::string& out_file) {
  const ocld::SceneBundle scene = ocld::load_scene(scene_dir);
  const std::string info_path = (fs::path(renders_dir) / "render_info.json").string();
  uint64_t config_hash = 0;
  std::string split = "test";
  if (fs::exists(info_path)) {
    const json info = json::parse(read_file(info_path));
    config_hash = info.value("config_hash", 0ull);
    split = info.value("split", "test");
  }

  struct GtView {
    ocld::Image rgb;
    std::optional<ocld::Mask> mask;
  };
  std::vector<GtView> gt;
  if (split == "train")
    for (const auto& v : scene.train) gt.push_back({v.rgb, v.mask});
  else
    for (const auto& v : scene.test) gt.push_back({v.rgb, v.mask});

  size_t n_renders = 0;
  for (;; ++n_renders) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "%04zu", n_renders);
    if (!fs::exists(fs::path(renders_dir) / (std::string(stem) + ".rgb.png"))) break;
  }
  if (n_renders != gt.size())
    throw std::runtime_error("eval: render count (" + std::to_string(n_renders) +
                             ") does not match " + split + " view count (" +
                             std::to_string(gt.size()) + ")");

  ocld::MetricReport report;
  report.config_hash = config_hash;
  for (size_t i = 0; i < gt.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "%04zu", i);
    const ocld::Image rendered = ocld::load_png_rgb(
        (fs::path(renders_dir) / (std::string(stem) + ".rgb.png")).string());
    if (!rendered.same_shape(gt[i].rgb))
      throw std::runtime_error("eval: render shape mismatch at view " +
                               std::to_string(i));
    ocld::ViewMetrics m;
    m.view = static_cast<int>(i);
    m.psnr_full = ocld::psnr(rendered, gt[i].rgb);
    m.ssim_full = ocld::ssim(rendered, gt[i].rgb);
    m.l2_full = ocld::masked_l2(rendered, gt[i].rgb,
                                ocld::Mask(rendered.height, rendered.width, true));
    if (gt[i].mask) {
      m.psnr_masked = ocld::psnr_masked(rendered, gt[i].rgb, *gt[i].mask);
      m.ssim_masked = ocld::ssim_masked(rendered, gt[i].rgb, *gt[i].mask);
      m.l2_masked = ocld::masked_l2(rendered, gt[i].rgb, *gt[i].mask);
    }
    report.per_view.push_back(m);
  }
  write_file(out_file, report.to_json());
  std::cout << report.to_table();
  return 0;
}

int cmd_compare(const std::string& path_a, const std::string& path_b,
                const std::string& out_file) {
  const ocld::MetricReport a = ocld::MetricReport::from_json(read_file(path_a));
  const ocld::MetricReport b = ocld::MetricReport::from_json(read_file(path_b));

  struct Row {
    std::string metric;
    std::optional<double> va, vb;
    bool higher_wins;
  };
  const std::vector<Row> rows = {
      {"psnr", a.mean_psnr_full(), b.mean_psnr_full(), true},
      {"ssim", a.mean_ssim_full(), b.mean_ssim_full(), true},
      {"l2", a.mean_l2_full(), b.mean_l2_full(), false},
      {"psnr_masked", a.mean_psnr_masked(), b.mean_psnr_masked(), true},
      {"ssim_masked", a.mean_ssim_masked(), b.mean_ssim_masked(), true},
      {"l2_masked", a.mean_l2_masked(), b.mean_l2_masked(), false},
  };
  std::ostringstream table;
  char line[160];
  std::snprintf(line, sizeof(line), "%-12s %14s %14s %8s\n", "metric", "A", "B",
                "winner");
  table << line;
  for (const Row& r : rows) {
    if (!r.va || !r.vb) continue;
    const char* winner = "tie";
    if (*r.va != *r.vb) winner = ((*r.va > *r.vb) == r.higher_wins) ? "A" : "B";
    std::snprintf(line, sizeof(line), "%-12s %14.8f %14.8f %8s\n",
                  r.metric.c_str(), *r.va, *r.vb, winner);
    table << line;
  }
  std::cout << table.str();
  if (!out_file.empty()) write_file(out_file, table.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"occlusion-aware radiance field inpainting via collaborative score distillation"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-scene", "generate a synthetic occluded scene");
  std::string gen_spec, gen_out;
  uint64_t gen_seed = 0;
  gen->add_option("--spec", gen_spec, "scene spec JSON (defaults used when omitted)");
  gen->add_option("--out", gen_out, "output scene directory")->required();
  gen->add_option("--seed", gen_seed, "generator seed");

  auto* train = app.add_subcommand("train", "train a field from a run config");
  std::string train_config, train_resume, train_out;
  int stop_after = 0, train_threads = 0;
  bool no_cds = false, no_grid = false, no_ref = false;
  std::optional<uint64_t> train_seed;
  train->add_option("--config", train_config, "run config JSON")->required();
  train->add_option("--resume", train_resume, "checkpoint to resume from");
  train->add_option("--stop-after", stop_after, "stop after this iteration (0 = run to max_iter)");
  train->add_option("--seed", train_seed, "override the config seed");
  train->add_option("--out", train_out, "override the output directory");
  train->add_option("--threads", train_threads, "worker threads (0 = hardware)");
  train->add_flag("--no-cds", no_cds, "ablation: per-view SDS instead of CDS");
  train->add_flag("--no-grid", no_grid, "ablation: per-view denoising instead of grids");
  train->add_flag("--no-ref", no_ref, "ablation: no reference views");

  auto* render = app.add_subcommand("render", "render a checkpoint at scene cameras");
  std::string render_ckpt, render_scene, render_split = "test", render_out;
  uint64_t render_seed = 0;
  int render_samples = 128, render_threads = 0;
  render->add_option("--checkpoint", render_ckpt, "checkpoint path")->required();
  render->add_option("--scene", render_scene, "scene directory")->required();
  render->add_option("--split", render_split, "train or test");
  render->add_option("--out", render_out, "output directory")->required();
  render->add_option("--seed", render_seed, "render jitter seed");
  render->add_option("--samples", render_samples, "samples per ray");
  render->add_option("--threads", render_threads, "worker threads (0 = hardware)");

  auto* eval = app.add_subcommand("eval", "evaluate renders against scene ground truth");
  std::string eval_renders, eval_scene, eval_out;
  eval->add_option("--renders", eval_renders, "renders directory")->required();
  eval->add_option("--scene", eval_scene, "scene directory")->required();
  eval->add_option("--out", eval_out, "metric report JSON output")->required();

  auto* compare = app.add_subcommand("compare", "compare two metric reports");
  std::string cmp_a, cmp_b, cmp_out;
  compare->add_option("--a", cmp_a, "report A")->required();
  compare->add_option("--b", cmp_b, "report B")->required();
  compare->add_option("--out", cmp_out, "write the table here as well");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_scene(gen_spec, gen_out, gen_seed);
    if (train->parsed())
      return cmd_train(train_config, train_resume, stop_after, train_seed,
                       train_out, train_threads, no_cds, no_grid, no_ref);
    if (render->parsed())
      return cmd_render(render_ckpt, render_scene, render_split, render_out,
                        render_seed, render_samples, render_threads);
    if (eval->parsed()) return cmd_eval(eval_renders, eval_scene, eval_out);
    if (compare->parsed()) return cmd_compare(cmp_a, cmp_b, cmp_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
