// SPDX-License-Identifier: Apache-2.0

#include "mapvae/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>

#include "mapvae/errors.hpp"
#include "mapvae/pointcloud_io.hpp"
#include "mapvae/rng.hpp"
#include "mapvae/transport.hpp"

namespace mapvae::pipeline {

namespace fs = std::filesystem;
using diffcore::Tensor;
using geometry::operator-;
using geometry::operator+;
using geometry::operator*;

// ---------------------------------------------------------------------------
// TrainConfig

model::Dims TrainConfig::dims() const {
  model::Dims d;
  d.n_half = n_half;
  d.v_angles = v_angles;
  d.w_steps = w_steps;
  d.feat = feat;
  d.hidden = hidden;
  d.latent = latent;
  return d.resolved();
}

model::Hyper TrainConfig::hyper() const {
  model::Hyper h;
  h.alpha = alpha;
  h.beta = beta;
  h.variational = variational;
  h.branch_r = branch_r;
  return h;
}

void TrainConfig::validate() const {
  if (v_angles < 1) throw UsageError("config: V must be >= 1");
  if (w_steps < 1 || w_steps > v_angles) throw UsageError("config: need 1 <= W <= V");
  if (scheme == "uniform" && v_angles % w_steps != 0) {
    throw UsageError("config: uniform scheme requires W to divide V (W=" +
                     std::to_string(w_steps) + ", V=" + std::to_string(v_angles) + ")");
  }
  geometry::parse_split_mode(split_mode);
  geometry::parse_sequence_scheme(scheme);
  if (pretrain_loss != "emd" && pretrain_loss != "chamfer") {
    throw UsageError("config: pretrain_loss must be emd or chamfer");
  }
  if (n_half < 4) throw UsageError("config: N must be >= 4");
  if (batch_size < 1) throw UsageError("config: batch_size must be >= 1");
  if (knn_k < 1 || knn_k >= 2 * n_half) throw UsageError("config: need 1 <= k < 2N");
  if (lr <= 0) throw UsageError("config: lr must be positive");
}

TrainConfig TrainConfig::completion_preset() const {
  TrainConfig c = *this;
  c.alpha = 0.0;
  c.w_steps = 12;
  c.v_angles = std::max(c.v_angles, 12);
  c.variational = false;
  return c;
}

namespace {

struct FieldDef {
  const char* key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const std::vector<FieldDef>& field_defs() {
  auto dbl = [](double TrainConfig::*m) {
    return FieldDef{nullptr,
                    [m](const TrainConfig& c) { return fmt_double(c.*m); },
                    [m](TrainConfig& c, const std::string& s) { c.*m = std::stod(s); }};
  };
  auto u64 = [](std::size_t TrainConfig::*m) {
    return FieldDef{nullptr,
                    [m](const TrainConfig& c) { return std::to_string(c.*m); },
                    [m](TrainConfig& c, const std::string& s) {
                      c.*m = static_cast<std::size_t>(std::stoull(s));
                    }};
  };
  auto i32 = [](int TrainConfig::*m) {
    return FieldDef{nullptr,
                    [m](const TrainConfig& c) { return std::to_string(c.*m); },
                    [m](TrainConfig& c, const std::string& s) { c.*m = std::stoi(s); }};
  };
  auto str = [](std::string TrainConfig::*m) {
    return FieldDef{nullptr, [m](const TrainConfig& c) { return c.*m; },
                    [m](TrainConfig& c, const std::string& s) { c.*m = s; }};
  };
  auto bol = [](bool TrainConfig::*m) {
    return FieldDef{nullptr,
                    [m](const TrainConfig& c) { return c.*m ? "true" : "false"; },
                    [m](TrainConfig& c, const std::string& s) {
                      if (s == "true" || s == "1") {
                        c.*m = true;
                      } else if (s == "false" || s == "0") {
                        c.*m = false;
                      } else {
                        throw UsageError("config: bad boolean '" + s + "'");
                      }
                    }};
  };

  static const std::vector<FieldDef> defs = [&] {
    std::vector<FieldDef> v;
    auto put = [&v](const char* key, FieldDef f) {
      f.key = key;
      v.push_back(std::move(f));
    };
    put("alpha", dbl(&TrainConfig::alpha));
    put("beta", dbl(&TrainConfig::beta));
    put("v", i32(&TrainConfig::v_angles));
    put("w", i32(&TrainConfig::w_steps));
    put("n", u64(&TrainConfig::n_half));
    put("z", u64(&TrainConfig::latent));
    put("df", u64(&TrainConfig::feat));
    put("dh", u64(&TrainConfig::hidden));
    put("k", u64(&TrainConfig::knn_k));
    put("mode", str(&TrainConfig::split_mode));
    put("scheme", str(&TrainConfig::scheme));
    put("lr", dbl(&TrainConfig::lr));
    put("batch", u64(&TrainConfig::batch_size));
    put("steps", u64(&TrainConfig::steps));
    put("pretrain_steps", u64(&TrainConfig::pretrain_steps));
    put("seed", FieldDef{nullptr,
                         [](const TrainConfig& c) { return std::to_string(c.seed); },
                         [](TrainConfig& c, const std::string& s) {
                           c.seed = std::stoull(s);
                         }});
    put("variational", bol(&TrainConfig::variational));
    put("branch_r", bol(&TrainConfig::branch_r));
    put("pretrain_loss", str(&TrainConfig::pretrain_loss));
    put("dataset", str(&TrainConfig::dataset));
    put("threads", i32(&TrainConfig::threads));
    put("out_dir", str(&TrainConfig::out_dir));
    put("checkpoint_every", u64(&TrainConfig::checkpoint_every));
    return v;
  }();
  return defs;
}

}  // namespace

std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& f : field_defs()) {
    out += f.key;
    out += '=';
    out += f.get(*this);
    out += '\n';
  }
  return out;
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    bool found = false;
    for (const auto& f : field_defs()) {
      if (key == f.key) {
        f.set(cfg, value);
        found = true;
        break;
      }
    }
    if (!found) throw UsageError("config: unknown key '" + key + "'");
  }
  return cfg;
}

TrainConfig TrainConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

// ---------------------------------------------------------------------------
// Datasets

PointCloud resample_to(const PointCloud& cloud, std::size_t count, std::uint64_t seed) {
  if (cloud.size() == 0) throw DataError("resample_to: empty cloud");
  rng::Engine eng(seed);
  std::vector<std::size_t> pick;
  if (cloud.size() >= count) {
    std::vector<std::size_t> idx(cloud.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rng::shuffle(idx, eng);
    pick.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count));
    std::sort(pick.begin(), pick.end());
  } else {
    pick.resize(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) pick[i] = i;
    while (pick.size() < count) pick.push_back(rng::below(eng, cloud.size()));
  }
  PointCloud out;
  out.points.reserve(count);
  for (std::size_t i : pick) out.points.push_back(cloud.points[i]);
  if (cloud.has_labels()) {
    out.labels.reserve(count);
    for (std::size_t i : pick) out.labels.push_back(cloud.labels[i]);
  }
  return out;
}

namespace {

PointCloud rotate_y(const PointCloud& cloud, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  PointCloud out = cloud;
  for (auto& p : out.points) {
    const double x = p[0], z = p[2];
    p[0] = c * x + s * z;
    p[2] = -s * x + c * z;
  }
  return out;
}

std::map<std::string, std::string> parse_kv(const std::string& spec) {
  std::map<std::string, std::string> kv;
  std::istringstream in(spec);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw UsageError("bad dataset spec item '" + item + "'");
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return kv;
}

Dataset synth_dataset(const std::string& spec, const TrainConfig& cfg) {
  auto kv = parse_kv(spec);
  if (!kv.count("classes")) throw UsageError("synth dataset needs classes=...");
  std::vector<std::string> kinds;
  {
    std::istringstream in(kv["classes"]);
    std::string k;
    while (std::getline(in, k, '+')) kinds.push_back(k);
  }
  const std::size_t per = kv.count("per") ? std::stoull(kv["per"]) : 30;
  const double jitter = kv.count("jitter") ? std::stod(kv["jitter"]) : 0.01;
  const std::uint64_t seed = kv.count("seed") ? std::stoull(kv["seed"]) : cfg.seed;

  Dataset ds;
  for (std::size_t ci = 0; ci < kinds.size(); ++ci) {
    const std::string& kind = kinds[ci];
    for (std::size_t i = 0; i < per; ++i) {
      const std::uint64_t s = rng::stream_seed(seed, rng::hash_str(kind), i);
      rng::Engine eng(s);
      geometry::SynthParams sp;
      sp.radius = rng::uniform(eng, 0.75, 1.25);
      sp.height = rng::uniform(eng, 1.4, 2.6);
      sp.extents = {rng::uniform(eng, 0.6, 1.3), rng::uniform(eng, 0.6, 1.3),
                    rng::uniform(eng, 0.6, 1.3)};
      sp.jitter = jitter;
      PointCloud cloud = geometry::synth_shape(kind, sp, 2 * cfg.n_half, eng());
      cloud = rotate_y(cloud, rng::uniform(eng, 0.0, 2.0 * M_PI));
      DatasetEntry e;
      e.name = kind + "_" + std::to_string(i);
      e.label = static_cast<int>(ci);
      e.cloud = geometry::normalize(cloud);
      ds.push_back(std::move(e));
    }
  }
  return ds;
}

Dataset directory_dataset(const std::string& dir, const TrainConfig& cfg) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory '" + dir + "' not found");
  std::vector<std::string> class_dirs;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) class_dirs.push_back(e.path().string());
  }
  std::sort(class_dirs.begin(), class_dirs.end());

  Dataset ds;
  auto load_one = [&](const std::string& path, int label) {
    PointCloud cloud = geometry::load_point_cloud(
        path, geometry::format_from_path(path), 2 * cfg.n_half,
        rng::stream_seed(cfg.seed, rng::hash_str(path)));
    if (cloud.size() != 2 * cfg.n_half) {
      cloud = resample_to(cloud, 2 * cfg.n_half,
                          rng::stream_seed(cfg.seed, rng::hash_str(path), 1));
    }
    DatasetEntry e;
    e.name = fs::path(path).stem().string();
    e.label = label;
    e.cloud = geometry::normalize(cloud);
    ds.push_back(std::move(e));
  };

  if (class_dirs.empty()) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file()) files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) load_one(f, -1);
  } else {
    for (std::size_t ci = 0; ci < class_dirs.size(); ++ci) {
      std::vector<std::string> files;
      for (const auto& e : fs::directory_iterator(class_dirs[ci])) {
        if (e.is_regular_file()) files.push_back(e.path().string());
      }
      std::sort(files.begin(), files.end());
      for (const auto& f : files) load_one(f, static_cast<int>(ci));
    }
  }
  if (ds.empty()) throw DataError("dataset '" + dir + "' contains no point clouds");
  return ds;
}

}  // namespace

Dataset load_dataset(const std::string& spec, const TrainConfig& cfg) {
  if (spec.rfind("synth:", 0) == 0) return synth_dataset(spec.substr(6), cfg);
  return directory_dataset(spec, cfg);
}

// ---------------------------------------------------------------------------
// Splitting cache and preparation

namespace {

std::uint64_t cloud_hash(const PointCloud& cloud) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  const auto mixin = [&h](const void* data, std::size_t bytes) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ull;
    }
  };
  mixin(cloud.flat(), cloud.size() * 3 * sizeof(double));
  if (cloud.has_labels()) mixin(cloud.labels.data(), cloud.labels.size() * sizeof(int));
  return h;
}

using SampleVec = std::vector<geometry::TrainingSample>;

}  // namespace

std::vector<geometry::TrainingSample> cloud_samples(const PointCloud& cloud,
                                                    const TrainConfig& cfg) {
  static std::mutex mu;
  static std::map<std::string, std::shared_ptr<const SampleVec>> cache;

  std::string key = std::to_string(cloud_hash(cloud)) + "|" +
                    std::to_string(cfg.v_angles) + "|" + std::to_string(cfg.w_steps) +
                    "|" + std::to_string(cfg.n_half) + "|" + cfg.split_mode + "|" +
                    cfg.scheme + "|" + std::to_string(cfg.knn_k) + "|" +
                    std::to_string(cfg.seed);
  {
    std::lock_guard<std::mutex> lock(mu);
    const auto it = cache.find(key);
    if (it != cache.end()) return *it->second;
  }
  auto computed = std::make_shared<const SampleVec>(geometry::build_sequence_pairs(
      cloud, cfg.v_angles, cfg.w_steps, cfg.n_half,
      geometry::parse_split_mode(cfg.split_mode),
      geometry::parse_sequence_scheme(cfg.scheme), cfg.seed, cfg.knn_k));
  {
    std::lock_guard<std::mutex> lock(mu);
    cache.emplace(std::move(key), computed);
  }
  return *computed;
}

PreparedCloud prepare_cloud(const DatasetEntry& entry, const TrainConfig& cfg,
                            ParamSet& encoder_params, const PointCloud* target_override) {
  PreparedCloud pc;
  pc.entry = entry;
  pc.samples = cloud_samples(entry.cloud, cfg);
  pc.target = target_override != nullptr ? *target_override : entry.cloud;
  const model::Dims d = cfg.dims();
  pc.features.reserve(pc.samples.size());
  for (const auto& s : pc.samples) {
    pc.features.push_back(model::compute_features(s, encoder_params, d));
  }
  return pc;
}

std::vector<PreparedCloud> prepare_dataset(const Dataset& dataset, const TrainConfig& cfg,
                                           ParamSet& encoder_params) {
  std::vector<PreparedCloud> out(dataset.size());
  parallel_for(dataset.size(), cfg.threads, [&](std::size_t i) {
    out[i] = prepare_cloud(dataset[i], cfg, encoder_params);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Schedule

Schedule::Schedule(std::size_t n_clouds, int v_angles, std::uint64_t seed) : eng_(seed) {
  if (n_clouds == 0 || v_angles < 1) throw UsageError("schedule: empty dataset");
  epoch_.reserve(n_clouds * static_cast<std::size_t>(v_angles));
  for (std::size_t c = 0; c < n_clouds; ++c) {
    for (int v = 0; v < v_angles; ++v) {
      epoch_.push_back({c, static_cast<std::size_t>(v)});
    }
  }
  rng::shuffle(epoch_, eng_);
}

void Schedule::advance_to_epoch(std::uint64_t epoch) {
  if (epoch < current_epoch_) {
    throw UsageError("schedule: cannot rewind epochs");
  }
  while (current_epoch_ < epoch) {
    rng::shuffle(epoch_, eng_);
    ++current_epoch_;
  }
}

std::pair<std::size_t, std::size_t> Schedule::at(std::uint64_t global_pos) {
  advance_to_epoch(global_pos / epoch_.size());
  return epoch_[global_pos % epoch_.size()];
}

// ---------------------------------------------------------------------------
// Parallel helper

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  int t = threads;
  if (t <= 0) t = static_cast<int>(std::thread::hardware_concurrency());
  if (t < 1) t = 1;
  t = std::min<int>(t, static_cast<int>(n));
  if (t <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex emu;
  std::exception_ptr first_error;
  std::size_t first_error_index = 0;
  auto worker = [&](int wid) {
    for (std::size_t i = static_cast<std::size_t>(wid); i < n;
         i += static_cast<std::size_t>(t)) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(emu);
        if (!first_error || i < first_error_index) {
          first_error = std::current_exception();
          first_error_index = i;
        }
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(t - 1));
  for (int w = 1; w < t; ++w) pool.emplace_back(worker, w);
  worker(0);
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Loss CSV

void write_loss_csv(const std::string& path, const std::vector<LossRow>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write loss log '" + path + "'");
  out << "step,c_d,kl,c_r,c_p,total\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<unsigned long long>(r.step), r.loss.c_d, r.loss.kl,
                  r.loss.c_r, r.loss.c_p, r.loss.total);
    out << buf;
  }
  if (!out) throw DataError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Pretraining

namespace {

// One autoencoder reconstruction loss on a fresh tape.
double autoencoder_loss(ParamSet& ps, const std::string& enc_prefix,
                        const std::string& dec_prefix, const PointCloud& cloud,
                        bool use_emd, bool with_grad) {
  diffcore::Tape t;
  Tensor pts(cloud.size(), 3);
  std::memcpy(pts.data(), cloud.flat(), pts.size() * sizeof(double));
  const diffcore::VarId f = model::encoder_forward(t, ps, enc_prefix, t.input(std::move(pts)));
  const diffcore::VarId recon =
      model::pretrain_decoder_forward(t, ps, dec_prefix, f, cloud.size());
  const diffcore::VarId loss = use_emd ? t.emd_to(recon, cloud) : t.chamfer_to(recon, cloud);
  const double value = t.val(loss).v[0];
  if (!std::isfinite(value)) throw NumericError("non-finite pretraining loss");
  if (with_grad) {
    t.backward(loss);
    t.flush_param_grads();
  }
  return value;
}

void refresh_trainable(ParamSet& dst, const ParamSet& src) {
  for (std::size_t i = 0; i < src.blocks.size(); ++i) {
    if (src.blocks[i].trainable) dst.blocks[i].value.v = src.blocks[i].value.v;
  }
}

}  // namespace

ParamSet pretrain_encoders(const Dataset& dataset, const TrainConfig& cfg,
                           std::vector<LossRow>* log) {
  if (dataset.empty()) throw DataError("pretrain_encoders: empty dataset");
  cfg.validate();
  const model::Dims d = cfg.dims();
  const bool use_emd = cfg.pretrain_loss == "emd";

  ParamSet ps;
  model::init_encoder_params(ps, "enc_global.", d, rng::stream_seed(cfg.seed, 0xE9C61));
  model::init_encoder_params(ps, "enc_local.", d, rng::stream_seed(cfg.seed, 0xE9C10));
  model::init_pretrain_decoder(ps, "pre_g.", d, d.cloud_points(),
                               rng::stream_seed(cfg.seed, 0xDEC61));
  model::init_pretrain_decoder(ps, "pre_l.", d, d.n_half,
                               rng::stream_seed(cfg.seed, 0xDEC10));

  const diffcore::AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};

  // worker clones for deterministic parallel batches
  std::vector<ParamSet> slots(cfg.batch_size, ps);
  std::vector<double> slot_loss(cfg.batch_size, 0.0);

  auto run_phase = [&](const std::string& enc_prefix, const std::string& dec_prefix,
                       const std::vector<const PointCloud*>& items,
                       std::uint64_t schedule_seed, std::uint64_t step_base) {
    Schedule sched(items.size(), 1, schedule_seed);
    for (std::size_t step = 1; step <= cfg.pretrain_steps; ++step) {
      std::vector<const PointCloud*> batch(cfg.batch_size);
      for (std::size_t s = 0; s < cfg.batch_size; ++s) {
        batch[s] = items[sched.at((step - 1) * cfg.batch_size + s).first];
      }
      parallel_for(cfg.batch_size, cfg.threads, [&](std::size_t s) {
        refresh_trainable(slots[s], ps);
        slots[s].zero_grads();
        slot_loss[s] = autoencoder_loss(slots[s], enc_prefix, dec_prefix, *batch[s],
                                        use_emd, true);
      });
      ps.zero_grads();
      double mean_loss = 0.0;
      for (std::size_t s = 0; s < cfg.batch_size; ++s) {
        mean_loss += slot_loss[s];
        for (std::size_t b = 0; b < ps.blocks.size(); ++b) {
          if (!ps.blocks[b].trainable) continue;
          const auto& g = slots[s].blocks[b].grad.v;
          auto& dst = ps.blocks[b].grad.v;
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
      }
      mean_loss /= static_cast<double>(cfg.batch_size);
      for (auto& b : ps.blocks) {
        if (!b.trainable) continue;
        for (double& g : b.grad.v) g /= static_cast<double>(cfg.batch_size);
      }
      diffcore::adam_step(ps, adam);
      if (log != nullptr) {
        LossRow row;
        row.step = step_base + step;
        row.loss.c_d = mean_loss;
        row.loss.total = mean_loss;
        log->push_back(row);
      }
    }
  };

  // phase 1: global encoder on full clouds
  std::vector<const PointCloud*> clouds;
  clouds.reserve(dataset.size());
  for (const auto& e : dataset) clouds.push_back(&e.cloud);
  run_phase("enc_global.", "pre_g.", clouds, rng::stream_seed(cfg.seed, 0x5C4ED1), 0);

  // phase 2: local encoder on every front/back half
  std::vector<std::shared_ptr<PointCloud>> half_storage;
  std::vector<const PointCloud*> halves;
  for (const auto& e : dataset) {
    const auto samples = cloud_samples(e.cloud, cfg);
    // collect one front/back pair per distinct angle across the samples
    std::vector<bool> seen(static_cast<std::size_t>(cfg.v_angles) + 1, false);
    for (const auto& s : samples) {
      for (std::size_t w = 0; w < s.angles.size(); ++w) {
        const auto a = static_cast<std::size_t>(s.angles[w]);
        if (seen[a]) continue;
        seen[a] = true;
        half_storage.push_back(std::make_shared<PointCloud>(s.fronts[w]));
        half_storage.push_back(std::make_shared<PointCloud>(s.backs[w]));
      }
    }
  }
  for (const auto& h : half_storage) halves.push_back(h.get());
  run_phase("enc_local.", "pre_l.", halves, rng::stream_seed(cfg.seed, 0x5C4ED2),
            cfg.pretrain_steps);

  // keep only the encoders, frozen
  ParamSet out;
  for (auto& b : ps.blocks) {
    if (b.name.rfind("enc_", 0) == 0) {
      diffcore::ParamBlock& nb = out.add(b.name, b.value, false);
      nb.adam_m = b.adam_m;
      nb.adam_v = b.adam_v;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// MAP-VAE training

TrainResult train(const std::vector<PreparedCloud>& prepared, const ParamSet& encoders,
                  const TrainConfig& cfg, const Checkpoint* resume,
                  const std::string& checkpoint_path, const std::string& loss_csv_path) {
  cfg.validate();
  if (prepared.empty()) throw DataError("train: empty dataset");
  const model::Dims d = cfg.dims();
  const model::Hyper hyper = cfg.hyper();

  ParamSet params;
  std::uint64_t start_step = 0;
  if (resume != nullptr) {
    params = resume->params;
    start_step = resume->step;
  } else {
    for (const auto& b : encoders.blocks) {
      if (b.name.rfind("enc_", 0) != 0) continue;
      params.add(b.name, b.value, false);
    }
    if (params.blocks.empty()) throw DataError("train: encoders missing");
    model::init_model_params(params, d, rng::stream_seed(cfg.seed, 0x300DE1));
  }

  const diffcore::AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};

  struct Slot {
    ParamSet params;
    Tensor bn_mean, bn_var;
    model::LossOutput out;
  };
  std::vector<Slot> slots;
  slots.reserve(cfg.batch_size);
  for (std::size_t s = 0; s < cfg.batch_size; ++s) {
    Slot sl;
    sl.params = params;
    sl.bn_mean = Tensor(1, d.dec_pp);
    sl.bn_var = Tensor(1, d.dec_pp);
    slots.push_back(std::move(sl));
  }

  Schedule sched(prepared.size(), cfg.v_angles, rng::stream_seed(cfg.seed, 0x5C4ED0));

  std::ofstream csv;
  if (!loss_csv_path.empty()) {
    csv.open(loss_csv_path);
    if (!csv) throw DataError("cannot write loss log '" + loss_csv_path + "'");
    csv << "step,c_d,kl,c_r,c_p,total\n";
  }

  TrainResult result;
  result.log.reserve(cfg.steps);

  for (std::uint64_t step = start_step + 1; step <= cfg.steps; ++step) {
    std::vector<std::pair<std::size_t, std::size_t>> assign(cfg.batch_size);
    for (std::size_t s = 0; s < cfg.batch_size; ++s) {
      assign[s] = sched.at((step - 1) * cfg.batch_size + s);
    }

    parallel_for(cfg.batch_size, cfg.threads, [&](std::size_t s) {
      Slot& sl = slots[s];
      refresh_trainable(sl.params, params);
      sl.params.zero_grads();
      const PreparedCloud& pc = prepared[assign[s].first];
      model::LossOptions opts;
      opts.hyper = hyper;
      opts.noise_seed = rng::stream_seed(rng::combine(cfg.seed, 0x4015E), step, s);
      opts.with_grad = true;
      opts.features = &pc.features[assign[s].second];
      opts.recon_target = &pc.target;
      opts.bn_capture_mean = &sl.bn_mean;
      opts.bn_capture_var = &sl.bn_var;
      sl.out = model::run_loss(pc.samples[assign[s].second], sl.params, d, opts);
    });

    params.zero_grads();
    LossRow row;
    row.step = step;
    std::vector<const Tensor*> means, vars;
    for (std::size_t s = 0; s < cfg.batch_size; ++s) {
      row.loss.c_d += slots[s].out.loss.c_d;
      row.loss.kl += slots[s].out.loss.kl;
      row.loss.c_r += slots[s].out.loss.c_r;
      row.loss.c_p += slots[s].out.loss.c_p;
      row.loss.total += slots[s].out.loss.total;
      means.push_back(&slots[s].bn_mean);
      vars.push_back(&slots[s].bn_var);
      for (std::size_t b = 0; b < params.blocks.size(); ++b) {
        if (!params.blocks[b].trainable) continue;
        const auto& g = slots[s].params.blocks[b].grad.v;
        auto& dst = params.blocks[b].grad.v;
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      }
    }
    const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
    row.loss.c_d *= inv_b;
    row.loss.kl *= inv_b;
    row.loss.c_r *= inv_b;
    row.loss.c_p *= inv_b;
    row.loss.total *= inv_b;
    for (auto& b : params.blocks) {
      if (!b.trainable) continue;
      for (double& g : b.grad.v) g *= inv_b;
    }
    if (!std::isfinite(row.loss.total)) {
      throw NumericError("non-finite batch loss at step " + std::to_string(step));
    }

    diffcore::adam_step(params, adam);
    model::merge_bn_captures(params, d, means, vars);

    result.log.push_back(row);
    if (csv.is_open()) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                    static_cast<unsigned long long>(row.step), row.loss.c_d, row.loss.kl,
                    row.loss.c_r, row.loss.c_p, row.loss.total);
      csv << buf;
    }

    const bool periodic = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
    if (!checkpoint_path.empty() && (periodic || step == cfg.steps)) {
      Checkpoint ck;
      ck.params = params;
      // runtime-only fields stay out of the snapshot so identical training
      // runs produce identical checkpoints regardless of where they write
      TrainConfig snap = cfg;
      snap.out_dir.clear();
      snap.threads = 0;
      ck.config_text = snap.to_text();
      ck.step = step;
      diffcore::save_checkpoint(checkpoint_path, ck);
    }
  }

  result.params = std::move(params);
  result.final_step = cfg.steps;
  return result;
}

// ---------------------------------------------------------------------------
// Completion

std::vector<CompletionEntry> make_completion_dataset(const std::vector<PointCloud>& partials,
                                                     const std::vector<PointCloud>& completes,
                                                     std::size_t n_half,
                                                     std::uint64_t seed) {
  if (partials.size() != completes.size()) {
    throw DataError("make_completion_dataset: " + std::to_string(partials.size()) +
                    " partials vs " + std::to_string(completes.size()) + " completes");
  }
  if (partials.empty()) throw DataError("make_completion_dataset: no pairs");

  std::vector<CompletionEntry> out;
  out.reserve(partials.size());
  for (std::size_t i = 0; i < partials.size(); ++i) {
    const PointCloud& complete = completes[i];
    if (complete.size() == 0 || partials[i].size() == 0) {
      throw DataError("make_completion_dataset: empty cloud in pair " + std::to_string(i));
    }
    // normalize with the complete cloud's frame so the pair stays aligned
    geometry::Vec3 centroid = {0, 0, 0};
    for (const auto& p : complete.points) centroid = centroid + p;
    centroid = (1.0 / static_cast<double>(complete.size())) * centroid;
    double max_norm = 0.0;
    for (const auto& p : complete.points) {
      max_norm = std::max(max_norm, geometry::norm(p - centroid));
    }
    if (max_norm <= 0.0) throw DataError("make_completion_dataset: degenerate complete cloud");
    const double inv = 1.0 / max_norm;

    auto apply = [&](const PointCloud& c) {
      PointCloud r = c;
      for (auto& p : r.points) p = inv * (p - centroid);
      return r;
    };

    CompletionEntry e;
    e.name = "pair_" + std::to_string(i);
    e.complete = resample_to(apply(complete), 2 * n_half, rng::stream_seed(seed, i, 1));
    e.partial = resample_to(apply(partials[i]), 2 * n_half, rng::stream_seed(seed, i, 2));
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<PreparedCloud> prepare_completion(const std::vector<CompletionEntry>& entries,
                                              const TrainConfig& cfg,
                                              ParamSet& encoder_params) {
  std::vector<PreparedCloud> out(entries.size());
  parallel_for(entries.size(), cfg.threads, [&](std::size_t i) {
    DatasetEntry e;
    e.name = entries[i].name;
    e.label = entries[i].label;
    e.cloud = entries[i].partial;
    out[i] = prepare_cloud(e, cfg, encoder_params, &entries[i].complete);
  });
  return out;
}

}  // namespace mapvae::pipeline
