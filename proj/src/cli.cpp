// SPDX-License-Identifier: Apache-2.0

#include "mapvae/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>

#include "mapvae/errors.hpp"
#include "mapvae/eval.hpp"
#include "mapvae/kernels.hpp"
#include "mapvae/pipeline.hpp"
#include "mapvae/rng.hpp"
#include "mapvae/transport.hpp"

namespace mapvae::cli {

namespace fs = std::filesystem;
using pipeline::TrainConfig;

namespace {

struct CommonState {
  TrainConfig cfg;
  std::string config_path;
  std::string backend;
};

// Bind every TrainConfig field so that explicit flags override values loaded
// from --config (the file is applied in the pre-parse callback, before CLI11
// writes flag values into the struct).
void add_config_flags(CLI::App* cmd, CommonState& st) {
  // the file itself is applied before parsing (see run()); the option is
  // registered here so it is accepted and documented on every subcommand
  cmd->add_option("--config", st.config_path, "flat key=value config file");
  cmd->add_option("--alpha", st.cfg.alpha, "KL weight in C_R");
  cmd->add_option("--beta", st.cfg.beta, "prediction weight in the objective");
  cmd->add_option("--v", st.cfg.v_angles, "number of viewing angles V");
  cmd->add_option("--w", st.cfg.w_steps, "angles per training sample W");
  cmd->add_option("--n", st.cfg.n_half, "points per half N (clouds carry 2N)");
  cmd->add_option("--z", st.cfg.latent, "latent dimension Z");
  cmd->add_option("--df", st.cfg.feat, "low-level feature width D_f");
  cmd->add_option("--dh", st.cfg.hidden, "GRU hidden width D_h");
  cmd->add_option("--k", st.cfg.knn_k, "kNN graph degree for geodesics");
  cmd->add_option("--mode", st.cfg.split_mode, "split mode: euclidean|geodesic");
  cmd->add_option("--scheme", st.cfg.scheme, "angle scheme: uniform|contiguous|random");
  cmd->add_option("--lr", st.cfg.lr, "Adam learning rate");
  cmd->add_option("--batch", st.cfg.batch_size, "batch size");
  cmd->add_option("--steps", st.cfg.steps, "training steps");
  cmd->add_option("--pretrain-steps", st.cfg.pretrain_steps, "encoder pretraining steps");
  cmd->add_option("--seed", st.cfg.seed, "master seed");
  cmd->add_option("--variational", st.cfg.variational, "enable the variational head");
  cmd->add_option("--branch-r", st.cfg.branch_r, "include C_R in the objective");
  cmd->add_option("--pretrain-loss", st.cfg.pretrain_loss,
                  "pretraining reconstruction loss: emd|chamfer");
  cmd->add_option("--dataset", st.cfg.dataset,
                  "dataset directory or synth:classes=...,per=...");
  cmd->add_option("--threads", st.cfg.threads, "worker threads (0 = hardware)");
  cmd->add_option("--out", st.cfg.out_dir, "output directory");
  cmd->add_option("--checkpoint-every", st.cfg.checkpoint_every,
                  "periodic checkpoint interval (0 = final only)");
  cmd->add_option("--backend", st.backend, "kernel backend: auto|scalar|avx2");
}

void apply_backend(const std::string& backend) {
  if (backend.empty() || backend == "auto") return;
  if (backend == "scalar") {
    kernels::set_backend(kernels::Backend::scalar);
  } else if (backend == "avx2") {
    kernels::set_backend(kernels::Backend::avx2);
  } else {
    throw UsageError("unknown backend '" + backend + "'");
  }
}

fs::path ensure_out_dir(const TrainConfig& cfg) {
  fs::path dir(cfg.out_dir.empty() ? "out" : cfg.out_dir);
  fs::create_directories(dir);
  return dir;
}

geometry::PointCloud load_input_cloud(const std::string& path, const TrainConfig& cfg) {
  geometry::PointCloud cloud = geometry::load_point_cloud(
      path, geometry::format_from_path(path), 2 * cfg.n_half, cfg.seed);
  if (cloud.size() != 2 * cfg.n_half) {
    cloud = pipeline::resample_to(cloud, 2 * cfg.n_half,
                                  rng::stream_seed(cfg.seed, rng::hash_str(path)));
  }
  return geometry::normalize(cloud);
}

// Load a checkpoint and adopt its stored configuration as the base config,
// keeping runtime fields (dataset, threads, out_dir) from the command line.
diffcore::Checkpoint load_model(const std::string& path, TrainConfig& cfg) {
  diffcore::Checkpoint ck = diffcore::load_checkpoint(path);
  if (!ck.config_text.empty()) {
    TrainConfig stored = TrainConfig::from_text(ck.config_text);
    stored.dataset = cfg.dataset.empty() ? stored.dataset : cfg.dataset;
    stored.threads = cfg.threads;
    stored.out_dir = cfg.out_dir;
    cfg = stored;
  }
  return ck;
}

struct EmbeddedDataset {
  pipeline::Dataset dataset;
  std::vector<eval::ShapeEmbedding> embeddings;
};

EmbeddedDataset embed_dataset(const TrainConfig& cfg, diffcore::ParamSet& params) {
  EmbeddedDataset out;
  out.dataset = pipeline::load_dataset(cfg.dataset, cfg);
  const auto prepared = pipeline::prepare_dataset(out.dataset, cfg, params);
  out.embeddings.resize(prepared.size());
  const model::Dims dims = cfg.dims();
  for (std::size_t i = 0; i < prepared.size(); ++i) {
    out.embeddings[i] = eval::embed_shape(prepared[i], params, dims);
  }
  return out;
}

// Deterministic per-class holdout split: the last `holdout` shapes of each
// class (by dataset order) form the test set.
std::vector<bool> holdout_mask(const pipeline::Dataset& ds, std::size_t holdout) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds[i].label].push_back(i);
  std::vector<bool> is_test(ds.size(), false);
  for (auto& [label, idx] : by_class) {
    const std::size_t h = std::min(holdout, idx.size() > 1 ? idx.size() - 1 : 0);
    for (std::size_t j = idx.size() - h; j < idx.size(); ++j) is_test[idx[j]] = true;
  }
  return is_test;
}

int cmd_split(const CommonState& st, const std::string& input) {
  const TrainConfig& cfg = st.cfg;
  cfg.validate();
  const fs::path dir = ensure_out_dir(cfg);
  const geometry::PointCloud cloud = load_input_cloud(input, cfg);
  const auto samples = pipeline::cloud_samples(cloud, cfg);
  char name[64];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::snprintf(name, sizeof name, "sample_%02zu", i + 1);
    const fs::path sdir = dir / name;
    fs::create_directories(sdir);
    for (std::size_t w = 0; w < samples[i].fronts.size(); ++w) {
      std::snprintf(name, sizeof name, "front_%zu.xyz", w + 1);
      geometry::save_point_cloud(samples[i].fronts[w], (sdir / name).string(),
                                 geometry::CloudFormat::xyz_text);
      std::snprintf(name, sizeof name, "back_%zu.xyz", w + 1);
      geometry::save_point_cloud(samples[i].backs[w], (sdir / name).string(),
                                 geometry::CloudFormat::xyz_text);
    }
  }
  std::cout << "wrote " << samples.size() << " sample directories under " << dir << "\n";
  return 0;
}

int cmd_pretrain(const CommonState& st) {
  const TrainConfig& cfg = st.cfg;
  cfg.validate();
  if (cfg.dataset.empty()) throw UsageError("pretrain: --dataset is required");
  const fs::path dir = ensure_out_dir(cfg);
  const pipeline::Dataset ds = pipeline::load_dataset(cfg.dataset, cfg);
  std::vector<pipeline::LossRow> log;
  diffcore::ParamSet encoders = pipeline::pretrain_encoders(ds, cfg, &log);
  pipeline::write_loss_csv((dir / "pretrain_loss.csv").string(), log);
  diffcore::Checkpoint ck;
  ck.params = std::move(encoders);
  ck.config_text = cfg.to_text();
  ck.step = 2 * cfg.pretrain_steps;
  diffcore::save_checkpoint((dir / "encoders.ckpt").string(), ck);
  std::cout << "pretrained encoders -> " << (dir / "encoders.ckpt") << "\n";
  return 0;
}

int cmd_train(const CommonState& st, const std::string& encoders_path,
              const std::string& resume_path) {
  TrainConfig cfg = st.cfg;
  cfg.validate();
  if (cfg.dataset.empty()) throw UsageError("train: --dataset is required");
  const fs::path dir = ensure_out_dir(cfg);
  const pipeline::Dataset ds = pipeline::load_dataset(cfg.dataset, cfg);

  diffcore::ParamSet encoders;
  if (!encoders_path.empty()) {
    encoders = diffcore::load_checkpoint(encoders_path).params;
    model::set_encoders_frozen(encoders, true);
  } else if (resume_path.empty()) {
    std::cout << "no --encoders given; pretraining first\n";
    std::vector<pipeline::LossRow> plog;
    encoders = pipeline::pretrain_encoders(ds, cfg, &plog);
    pipeline::write_loss_csv((dir / "pretrain_loss.csv").string(), plog);
  }

  diffcore::Checkpoint resume;
  const diffcore::Checkpoint* resume_ptr = nullptr;
  if (!resume_path.empty()) {
    resume = diffcore::load_checkpoint(resume_path);
    resume_ptr = &resume;
    if (encoders_path.empty()) {
      // recover the frozen encoders from the resumed parameters
      for (const auto& b : resume.params.blocks) {
        if (b.name.rfind("enc_", 0) == 0) encoders.add(b.name, b.value, false);
      }
    }
  }

  auto prepared = pipeline::prepare_dataset(ds, cfg, encoders);
  const pipeline::TrainResult res =
      pipeline::train(prepared, encoders, cfg, resume_ptr,
                      (dir / "model.ckpt").string(), (dir / "loss.csv").string());
  std::cout << "trained " << res.final_step << " steps; final total loss "
            << (res.log.empty() ? 0.0 : res.log.back().loss.total) << "\n";
  std::cout << "checkpoint -> " << (dir / "model.ckpt") << "\n";
  return 0;
}

int cmd_embed(const CommonState& st, const std::string& model_path) {
  TrainConfig cfg = st.cfg;
  diffcore::Checkpoint ck = load_model(model_path, cfg);
  if (cfg.dataset.empty()) throw UsageError("embed: --dataset is required");
  const fs::path dir = ensure_out_dir(cfg);
  EmbeddedDataset ed = embed_dataset(cfg, ck.params);
  std::vector<std::string> names;
  std::vector<int> labels;
  for (const auto& e : ed.dataset) {
    names.push_back(e.name);
    labels.push_back(e.label);
  }
  eval::write_embeddings_csv((dir / "embeddings.csv").string(), names, labels,
                             ed.embeddings);
  std::cout << "wrote " << ed.embeddings.size() << " embeddings -> "
            << (dir / "embeddings.csv") << "\n";
  return 0;
}

int cmd_classify(const CommonState& st, const std::string& model_path,
                 std::size_t holdout) {
  TrainConfig cfg = st.cfg;
  diffcore::Checkpoint ck = load_model(model_path, cfg);
  if (cfg.dataset.empty()) throw UsageError("classify: --dataset is required");
  const fs::path dir = ensure_out_dir(cfg);
  EmbeddedDataset ed = embed_dataset(cfg, ck.params);

  const std::vector<bool> is_test = holdout_mask(ed.dataset, holdout);
  std::vector<std::vector<double>> train_x, test_x;
  std::vector<int> train_y, test_y;
  for (std::size_t i = 0; i < ed.dataset.size(); ++i) {
    if (is_test[i]) {
      test_x.push_back(ed.embeddings[i].h);
      test_y.push_back(ed.dataset[i].label);
    } else {
      train_x.push_back(ed.embeddings[i].h);
      train_y.push_back(ed.dataset[i].label);
    }
  }
  const eval::LinearProbe probe = eval::train_probe(train_x, train_y, cfg.seed);
  const double train_acc = eval::probe_accuracy(probe, train_x, train_y);
  const double test_acc = eval::probe_accuracy(probe, test_x, test_y);

  std::ofstream csv(dir / "classification.csv");
  csv << "split,count,accuracy\n";
  char buf[96];
  std::snprintf(buf, sizeof buf, "train,%zu,%.6f\ntest,%zu,%.6f\n", train_x.size(),
                train_acc, test_x.size(), test_acc);
  csv << buf;
  std::cout << "probe accuracy: train " << train_acc << ", held-out " << test_acc
            << " -> " << (dir / "classification.csv") << "\n";
  return 0;
}

int cmd_segment(const CommonState& st, const std::string& model_path,
                std::size_t holdout) {
  TrainConfig cfg = st.cfg;
  diffcore::Checkpoint ck = load_model(model_path, cfg);
  if (cfg.dataset.empty()) throw UsageError("segment: --dataset is required");
  const fs::path dir = ensure_out_dir(cfg);
  pipeline::Dataset ds = pipeline::load_dataset(cfg.dataset, cfg);
  ds.erase(std::remove_if(ds.begin(), ds.end(),
                          [](const pipeline::DatasetEntry& e) {
                            return !e.cloud.has_labels();
                          }),
           ds.end());
  if (ds.size() < 2) throw DataError("segment: need at least two labeled shapes");
  const auto prepared = pipeline::prepare_dataset(ds, cfg, ck.params);

  const model::Dims dims = cfg.dims();
  std::vector<eval::TransferredShape> shapes(prepared.size());
  pipeline::parallel_for(prepared.size(), cfg.threads, [&](std::size_t i) {
    shapes[i] = eval::transfer_labels(prepared[i], ck.params, dims);
  });

  const std::vector<bool> is_test = holdout_mask(ds, holdout);
  std::vector<eval::TransferredShape> train_shapes, test_shapes;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    (is_test[i] ? test_shapes : train_shapes).push_back(std::move(shapes[i]));
  }
  const eval::SegmentationMetrics m =
      eval::segment_evaluate(train_shapes, test_shapes, cfg.seed);

  std::ofstream csv(dir / "segmentation.csv");
  csv << "class,iou,accuracy\n";
  char buf[96];
  for (std::size_t c = 0; c < m.class_ids.size(); ++c) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f\n", m.class_ids[c], m.class_iou[c],
                  m.class_acc[c]);
    csv << buf;
  }
  std::snprintf(buf, sizeof buf, "mean,%.6f,%.6f\n", m.mean_iou, m.mean_acc);
  csv << buf;
  std::cout << "segmentation mIoU " << m.mean_iou << ", mean acc " << m.mean_acc
            << " -> " << (dir / "segmentation.csv") << "\n";
  return 0;
}

int cmd_generate(const CommonState& st, const std::string& model_path, int count) {
  TrainConfig cfg = st.cfg;
  diffcore::Checkpoint ck = load_model(model_path, cfg);
  const fs::path dir = ensure_out_dir(cfg);
  const model::Dims dims = cfg.dims();
  char name[64];
  for (int i = 0; i < count; ++i) {
    const geometry::PointCloud cloud =
        eval::generate(ck.params, dims, rng::stream_seed(cfg.seed, 0x93E, static_cast<std::uint64_t>(i)));
    std::snprintf(name, sizeof name, "gen_%02d.xyz", i);
    geometry::save_point_cloud(cloud, (dir / name).string(),
                               geometry::CloudFormat::xyz_text);
    std::snprintf(name, sizeof name, "gen_%02d.svg", i);
    geometry::export_projection(cloud, (dir / name).string());
  }
  std::cout << "generated " << count << " clouds under " << dir << "\n";
  return 0;
}

int cmd_interpolate(const CommonState& st, const std::string& model_path,
                    std::uint64_t seed_a, std::uint64_t seed_b, std::size_t steps) {
  TrainConfig cfg = st.cfg;
  diffcore::Checkpoint ck = load_model(model_path, cfg);
  const fs::path dir = ensure_out_dir(cfg);
  const model::Dims dims = cfg.dims();
  const auto za = diffcore::draw_standard_normal(cfg.latent, seed_a);
  const auto zb = diffcore::draw_standard_normal(cfg.latent, seed_b);
  const auto path = eval::interpolate(ck.params, dims, za, zb, steps);
  char name[64];
  for (std::size_t s = 0; s < path.size(); ++s) {
    std::snprintf(name, sizeof name, "interp_%02zu.xyz", s);
    geometry::save_point_cloud(path[s], (dir / name).string(),
                               geometry::CloudFormat::xyz_text);
    std::snprintf(name, sizeof name, "interp_%02zu.svg", s);
    geometry::export_projection(path[s], (dir / name).string());
  }
  std::cout << "interpolated " << steps << " steps under " << dir << "\n";
  return 0;
}

int cmd_complete(const CommonState& st, const std::string& model_path,
                 const std::string& input, const std::string& truth) {
  TrainConfig cfg = st.cfg;
  diffcore::Checkpoint ck = load_model(model_path, cfg);
  const fs::path dir = ensure_out_dir(cfg);

  geometry::PointCloud partial = geometry::load_point_cloud(
      input, geometry::format_from_path(input), 2 * cfg.n_half, cfg.seed);
  geometry::PointCloud complete_gt;
  if (!truth.empty()) {
    complete_gt = geometry::load_point_cloud(truth, geometry::format_from_path(truth),
                                             2 * cfg.n_half, cfg.seed);
  } else {
    complete_gt = partial;  // no ground truth: report against the partial itself
  }
  const auto pairs =
      pipeline::make_completion_dataset({partial}, {complete_gt}, cfg.n_half, cfg.seed);
  auto prepared = pipeline::prepare_completion(pairs, cfg, ck.params);
  const eval::CompletionResult res =
      eval::complete(prepared[0], ck.params, cfg.dims());

  geometry::save_point_cloud(res.completed, (dir / "completed.xyz").string(),
                             geometry::CloudFormat::xyz_text);
  geometry::export_projection(res.completed, (dir / "completed.svg").string());
  std::ofstream csv(dir / "completion.csv");
  char buf[64];
  std::snprintf(buf, sizeof buf, "emd_per_point\n%.9f\n", res.emd_per_point);
  csv << buf;
  std::cout << "completion EMD/point " << res.emd_per_point << " -> "
            << (dir / "completed.xyz") << "\n";
  return 0;
}

int cmd_export(const CommonState& st, const std::string& input, const std::string& synth,
               const std::string& out_path, const std::string& format,
               const std::string& projection) {
  const TrainConfig& cfg = st.cfg;
  geometry::PointCloud cloud;
  if (!synth.empty()) {
    cloud = geometry::normalize(
        geometry::synth_shape(synth, {}, 2 * cfg.n_half, cfg.seed));
  } else if (!input.empty()) {
    cloud = load_input_cloud(input, cfg);
  } else {
    throw UsageError("export: need --input or --synth");
  }
  if (out_path.empty()) throw UsageError("export: --file is required");
  geometry::save_point_cloud(cloud, out_path, geometry::parse_cloud_format(format));
  if (!projection.empty()) geometry::export_projection(cloud, projection);
  std::cout << "exported " << cloud.size() << " points -> " << out_path << "\n";
  return 0;
}

int cmd_selftest(const CommonState& st) {
  bool ok = true;
  auto report = [&ok](const char* name, bool pass) {
    std::cout << (pass ? "PASS " : "FAIL ") << name << "\n";
    ok = ok && pass;
  };

  // assignment oracle
  {
    rng::Engine eng(1);
    bool pass = true;
    for (int trial = 0; trial < 40; ++trial) {
      const std::size_t n = 2 + rng::below(eng, 7);
      geometry::PointCloud a, b;
      for (std::size_t i = 0; i < n; ++i) {
        a.points.push_back({rng::uniform(eng, -1, 1), rng::uniform(eng, -1, 1),
                            rng::uniform(eng, -1, 1)});
        b.points.push_back({rng::uniform(eng, -1, 1), rng::uniform(eng, -1, 1),
                            rng::uniform(eng, -1, 1)});
      }
      pass = pass && std::abs(transport::emd_exact(a, b).cost -
                              transport::emd_bruteforce(a, b).cost) <= 1e-9;
    }
    report("emd-oracle", pass);
  }

  // gradient micro-check of the composed objective
  {
    model::Dims d;
    d.n_half = 8;
    d.w_steps = 2;
    d.feat = 8;
    d.hidden = 8;
    d.latent = 4;
    d.enc_h1 = 8;
    d.enc_h2 = 8;
    diffcore::ParamSet ps;
    model::init_encoder_params(ps, "enc_global.", d, 1);
    model::init_encoder_params(ps, "enc_local.", d, 2);
    model::init_model_params(ps, d, 3);
    model::set_encoders_frozen(ps, true);
    rng::Engine eng(4);
    geometry::TrainingSample sample;
    auto rand_cloud = [&eng](std::size_t n) {
      geometry::PointCloud c;
      for (std::size_t i = 0; i < n; ++i) {
        c.points.push_back({rng::uniform(eng, -1, 1), rng::uniform(eng, -1, 1),
                            rng::uniform(eng, -1, 1)});
      }
      return c;
    };
    sample.full = rand_cloud(d.cloud_points());
    for (int w = 0; w < d.w_steps; ++w) {
      sample.fronts.push_back(rand_cloud(d.n_half));
      sample.backs.push_back(rand_cloud(d.n_half));
      sample.angles.push_back(w + 1);
    }
    const auto feats = model::compute_features(sample, ps, d);
    auto eval_fn = [&](bool with_grad) -> diffcore::EvalResult {
      model::LossOptions opts;
      opts.hyper.alpha = 0.01;
      opts.hyper.beta = 10.0;
      opts.noise_seed = 9;
      opts.with_grad = with_grad;
      opts.features = &feats;
      const model::LossOutput out = model::run_loss(sample, ps, d, opts);
      return {out.loss.total, out.structure_hash, out.tie};
    };
    const auto rep = diffcore::grad_check(eval_fn, ps, 1e-5, 24);
    report("gradient-suite", rep.total_checked > 100 && rep.worst <= 1e-3);
  }

  // splitting invariants on a handful of shapes
  {
    bool pass = true;
    for (int trial = 0; trial < 6; ++trial) {
      const geometry::PointCloud cloud = geometry::normalize(geometry::synth_shape(
          trial % 2 == 0 ? "sphere" : "two-part-table", {}, 64,
          static_cast<std::uint64_t>(trial)));
      const auto samples = geometry::build_sequence_pairs(
          cloud, 4, 2, 32, geometry::SplitMode::geodesic,
          geometry::SequenceScheme::uniform, 0, 6);
      pass = pass && samples.size() == 4;
      for (const auto& s : samples) {
        for (std::size_t w = 0; w < s.fronts.size(); ++w) {
          pass = pass && s.fronts[w].size() == 32 && s.backs[w].size() == 32;
        }
      }
    }
    report("splitting-invariants", pass);
  }

  (void)st;
  return ok ? 0 : 3;
}

}  // namespace

namespace {

struct AppState {
  CommonState common;
  std::string input, model_path, encoders_path, resume_path, truth;
  std::string export_file, export_format = "xyz", projection, synth;
  std::size_t holdout = 8;
  int gen_count = 4;
  std::uint64_t seed_a = 1, seed_b = 2;
  std::size_t interp_steps = 5;
};

std::unique_ptr<CLI::App> build_app(AppState& st) {
  auto app = std::make_unique<CLI::App>("mapvae: multi-angle point cloud feature learning");
  app->require_subcommand(1);

  auto* split = app->add_subcommand("split", "split a cloud into per-angle half pairs");
  add_config_flags(split, st.common);
  split->add_option("--input", st.input, "input point cloud")->required();

  auto* pretrain = app->add_subcommand("pretrain", "pretrain the encoders by self-reconstruction");
  add_config_flags(pretrain, st.common);

  auto* train = app->add_subcommand("train", "train the three-branch model");
  add_config_flags(train, st.common);
  train->add_option("--encoders", st.encoders_path, "pretrained encoder checkpoint");
  train->add_option("--resume", st.resume_path, "resume from a model checkpoint");

  auto* embed = app->add_subcommand("embed", "write the global embedding table");
  add_config_flags(embed, st.common);
  embed->add_option("--model", st.model_path, "trained model checkpoint")->required();

  auto* classify = app->add_subcommand("classify", "linear probe on the embeddings");
  add_config_flags(classify, st.common);
  classify->add_option("--model", st.model_path, "trained model checkpoint")->required();
  classify->add_option("--holdout", st.holdout, "held-out shapes per class");

  auto* segment = app->add_subcommand("segment", "label transfer + per-point classifier");
  add_config_flags(segment, st.common);
  segment->add_option("--model", st.model_path, "trained model checkpoint")->required();
  segment->add_option("--holdout", st.holdout, "held-out shapes per class");

  auto* generate = app->add_subcommand("generate", "decode latents from the unit Gaussian");
  add_config_flags(generate, st.common);
  generate->add_option("--model", st.model_path, "trained model checkpoint")->required();
  generate->add_option("--count", st.gen_count, "number of shapes");

  auto* interp = app->add_subcommand("interpolate", "decode a linear latent path");
  add_config_flags(interp, st.common);
  interp->add_option("--model", st.model_path, "trained model checkpoint")->required();
  interp->add_option("--seed-a", st.seed_a, "seed of the first latent");
  interp->add_option("--seed-b", st.seed_b, "seed of the second latent");
  interp->add_option("--frames", st.interp_steps, "interpolation frames (>= 2)");

  auto* complete = app->add_subcommand("complete", "complete a partial cloud");
  add_config_flags(complete, st.common);
  complete->add_option("--model", st.model_path, "completion-trained checkpoint")->required();
  complete->add_option("--input", st.input, "partial input cloud")->required();
  complete->add_option("--truth", st.truth, "ground-truth complete cloud");

  auto* exp = app->add_subcommand("export", "write a cloud (file or synthetic) to disk");
  add_config_flags(exp, st.common);
  exp->add_option("--input", st.input, "input point cloud");
  exp->add_option("--synth", st.synth, "synthetic kind (sphere, box, ...)");
  exp->add_option("--file", st.export_file, "output file path");
  exp->add_option("--format", st.export_format, "xyz|ply");
  exp->add_option("--projection", st.projection, "also write an SVG projection");

  auto* selftest = app->add_subcommand("selftest", "run the built-in oracle and gradient checks");
  add_config_flags(selftest, st.common);

  return app;
}

}  // namespace

std::string help_text() {
  AppState st;
  auto app = build_app(st);
  std::string out = app->help("", CLI::AppFormatMode::All);
  return out;
}

int run(std::vector<std::string> args) {
  AppState st;

  // apply --config before parsing so explicit flags override file values
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string path;
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    }
    if (!path.empty()) {
      try {
        st.common.cfg = TrainConfig::load_file(path);
      } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
      } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
      }
      break;
    }
  }

  auto app = build_app(st);

  std::reverse(args.begin(), args.end());  // CLI11 consumes a reversed vector
  try {
    app->parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app->exit(e);
  } catch (const CLI::ParseError& e) {
    app->exit(e);
    return 1;
  }

  try {
    apply_backend(st.common.backend);
    if (app->got_subcommand("split")) return cmd_split(st.common, st.input);
    if (app->got_subcommand("pretrain")) return cmd_pretrain(st.common);
    if (app->got_subcommand("train")) {
      return cmd_train(st.common, st.encoders_path, st.resume_path);
    }
    if (app->got_subcommand("embed")) return cmd_embed(st.common, st.model_path);
    if (app->got_subcommand("classify")) {
      return cmd_classify(st.common, st.model_path, st.holdout);
    }
    if (app->got_subcommand("segment")) {
      return cmd_segment(st.common, st.model_path, st.holdout);
    }
    if (app->got_subcommand("generate")) {
      return cmd_generate(st.common, st.model_path, st.gen_count);
    }
    if (app->got_subcommand("interpolate")) {
      return cmd_interpolate(st.common, st.model_path, st.seed_a, st.seed_b,
                             st.interp_steps);
    }
    if (app->got_subcommand("complete")) {
      return cmd_complete(st.common, st.model_path, st.input, st.truth);
    }
    if (app->got_subcommand("export")) {
      return cmd_export(st.common, st.input, st.synth, st.export_file,
                        st.export_format, st.projection);
    }
    if (app->got_subcommand("selftest")) return cmd_selftest(st.common);
    throw UsageError("no subcommand given");
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace mapvae::cli
