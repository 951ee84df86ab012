// Command-line front end: scene synthesis, training, evaluation,
// single-frame rendering and the five-variant ablation grid.

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flowsplat/render.hpp"
#include "flowsplat/scene.hpp"
#include "flowsplat/train.hpp"

namespace fs = flowsplat;

namespace {

void add_generate(CLI::App& app) {
  auto* cmd = app.add_subcommand("generate", "synthesize a preset scene");
  auto preset = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto seed = std::make_shared<std::uint64_t>(1);
  auto times = std::make_shared<int>(0);
  auto split = std::make_shared<double>(0.0);
  cmd->add_option("--preset", *preset, "spin|drift|multipart|breathe|hybrid")
      ->required();
  cmd->add_option("--out", *out, "scene JSON to write")->required();
  cmd->add_option("--seed", *seed, "generator seed (default 1)");
  cmd->add_option("--times", *times, "timestamp count override");
  cmd->add_option("--split", *split, "train fraction override, in (0,1)");
  cmd->callback([=] {
    fs::SceneSpec spec = fs::scene_preset(*preset);
    if (*times > 0) spec.n_times = static_cast<std::size_t>(*times);
    if (*split > 0.0) spec.split = *split;
    fs::Scene scene = fs::generate(spec, *seed);
    fs::save_scene(*out, scene);
    std::cout << "wrote " << *out << ": " << scene.particles.size()
              << " particles, " << scene.data.times.size()
              << " timestamps\n";
  });
}

void add_train(CLI::App& app) {
  auto* cmd = app.add_subcommand("train", "fit a model to a scene");
  auto config = std::make_shared<std::string>();
  cmd->add_option("--config", *config, "TrainConfig JSON")->required();
  cmd->callback([=] {
    fs::TrainConfig cfg = fs::load_train_config(*config);
    fs::TrainResult res = fs::run_training(cfg);
    if (!res.curve.empty()) {
      const fs::LossRow& last = res.curve.back();
      std::cout << "iteration " << last.iteration << ": total " << last.total
                << ", reconstruction " << last.reconstruction << '\n';
    }
    if (!cfg.out_log.empty())
      std::cout << "loss curve -> " << cfg.out_log << '\n';
    if (!cfg.out_checkpoint.empty())
      std::cout << "checkpoint -> " << cfg.out_checkpoint << '\n';
    if (res.aborted) {
      std::string msg = res.abort_reason;
      if (!cfg.out_checkpoint.empty())
        msg += "; last vetted checkpoint kept at " + cfg.out_checkpoint;
      throw fs::TrainError(msg);
    }
  });
}

void add_eval(CLI::App& app) {
  auto* cmd =
      app.add_subcommand("eval", "score a checkpoint against ground truth");
  auto ckpt = std::make_shared<std::string>();
  auto scene_path = std::make_shared<std::string>();
  auto csv = std::make_shared<std::string>();
  auto phase = std::make_shared<std::string>();
  auto size = std::make_shared<int>(96);
  auto workers = std::make_shared<int>(1);
  cmd->add_option("--checkpoint", *ckpt, "checkpoint JSON")->required();
  cmd->add_option("--scene", *scene_path, "scene JSON")->required();
  cmd->add_option("--csv", *csv, "metrics CSV to write")->required();
  cmd->add_option("--phase", *phase, "interp|extrap (default: both)");
  cmd->add_option("--size", *size, "render size in pixels");
  cmd->add_option("--workers", *workers, "render worker threads");
  cmd->callback([=] {
    fs::LoadedModel lm = fs::load_model(*ckpt);
    fs::Scene scene = fs::load_scene(*scene_path);
    fs::EvalConfig ecfg;
    ecfg.image_size = *size;
    ecfg.n_workers = *workers;
    std::vector<fs::Phase> phases;
    if (phase->empty())
      phases = {fs::Phase::kInterp, fs::Phase::kExtrap};
    else
      phases = {fs::phase_from_name(*phase, "--phase")};
    std::vector<fs::MetricsRow> rows;
    for (fs::Phase p : phases)
      rows.push_back(fs::evaluate(lm.model, lm.store, scene, p,
                                  lm.cfg.n_steps, ecfg));
    fs::write_metrics_csv(*csv, rows);
    std::cout << fs::kMetricsCsvHeader << '\n';
    for (const fs::MetricsRow& r : rows)
      std::cout << fs::metrics_csv_row(r) << '\n';
  });
}

void add_render(CLI::App& app) {
  auto* cmd = app.add_subcommand("render", "raster one predicted frame");
  auto ckpt = std::make_shared<std::string>();
  auto scene_path = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto t = std::make_shared<double>(0.0);
  auto size = std::make_shared<int>(256);
  auto workers = std::make_shared<int>(1);
  cmd->add_option("--checkpoint", *ckpt, "checkpoint JSON")->required();
  cmd->add_option("--scene", *scene_path, "scene JSON")->required();
  cmd->add_option("--t", *t, "time to predict at")->required();
  cmd->add_option("--out", *out, "PPM image to write")->required();
  cmd->add_option("--size", *size, "image size in pixels");
  cmd->add_option("--workers", *workers, "render worker threads");
  cmd->callback([=] {
    fs::LoadedModel lm = fs::load_model(*ckpt);
    fs::Scene scene = fs::load_scene(*scene_path);
    std::vector<double> when{*t};
    std::vector<fs::GaussianPrimitive> prims;
    prims.reserve(scene.particles.size());
    for (const fs::GaussianPrimitive& g : scene.particles) {
      auto path = lm.model.predict_path(lm.store, g, when, lm.cfg.n_steps);
      prims.push_back(fs::state_primitive(path.front(), g));
    }
    fs::Camera cam =
        fs::orbit_camera(fs::scene_bounds(scene), *size, *size, 45.0);
    fs::Image img = fs::render(prims, cam, *workers);
    fs::save_ppm(*out, img);
    std::cout << "wrote " << *out << " (" << img.width << "x" << img.height
              << ")\n";
  });
}

void add_ablate(CLI::App& app) {
  auto* cmd = app.add_subcommand("ablate", "train the five-variant grid");
  auto scene_path = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>("ablation.csv");
  auto config = std::make_shared<std::string>();
  auto iters = std::make_shared<int>(-1);
  auto seed = std::make_shared<std::uint64_t>(1);
  cmd->add_option("--scene", *scene_path, "scene JSON")->required();
  cmd->add_option("--out", *out, "CSV to write (default ablation.csv)");
  cmd->add_option("--config", *config, "base TrainConfig JSON");
  cmd->add_option("--iterations", *iters, "iteration count override");
  auto* seed_opt = cmd->add_option("--seed", *seed, "seed override");
  cmd->callback([=] {
    fs::Scene scene = fs::load_scene(*scene_path);
    fs::TrainConfig base;
    if (!config->empty()) base = fs::load_train_config(*config);
    base.scene = *scene_path;
    if (*iters >= 0) base.iterations = *iters;
    if (seed_opt->count() > 0) base.seed = *seed;
    std::vector<fs::AblationRun> runs;
    runs.reserve(fs::kAblationVariants.size());
    for (const char* tag : fs::kAblationVariants) {
      fs::TrainConfig cfg = fs::variant_config(base, tag);
      fs::Trainer trainer(cfg, scene);
      fs::TrainResult res = trainer.run();
      fs::AblationRun run;
      run.variant = tag;
      run.aborted = res.aborted;
      run.extrap = fs::evaluate(trainer.model(), trainer.store(), scene,
                                fs::Phase::kExtrap, cfg.n_steps);
      std::cout << tag << ": extrap pos_err " << run.extrap.pos_err
                << (run.aborted ? " (aborted)" : "") << '\n';
      runs.push_back(std::move(run));
    }
    fs::write_ablation_csv(*out, runs);
    std::cout << "wrote " << *out << '\n';
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowsplat: learned velocity fields for Gaussian particles"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  add_generate(app);
  add_train(app);
  add_eval(app);
  add_render(app);
  add_ablate(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const std::exception& e) {
    std::cerr << "flowsplat: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
