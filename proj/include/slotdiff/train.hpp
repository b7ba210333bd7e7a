#pragma once

#include <atomic>
#include <filesystem>
#include <iomanip>
#include <thread>

#include "slotdiff/checkpoint.hpp"
#include "slotdiff/model.hpp"

// Training loops for the broadcast, diffusion, and video paths, plus
// dataset generation. Single-threaded through the step so a (config, seed)
// pair reproduces its loss log and checkpoints byte for byte.

namespace slotdiff {

// Writes train/ and val/ splits under cfg.io_data_dir.
inline void generate_dataset(const Config& cfg, int threads = 1) {
  SceneConfig sc = cfg.scene();
  auto gen_split = [&](const std::string& name, int64_t count, uint64_t seed_base) {
    std::string dir = cfg.io_data_dir + "/" + name;
    if (cfg.video()) {
      std::vector<VideoSample> clips(static_cast<size_t>(count));
      auto work = [&](int64_t i) { clips[size_t(i)] = gen_video(seed_base + uint64_t(i), sc); };
      if (threads <= 1) {
        for (int64_t i = 0; i < count; ++i) work(i);
      } else {
        std::vector<std::thread> pool;
        std::atomic<int64_t> next{0};
        for (int tid = 0; tid < threads; ++tid)
          pool.emplace_back([&]() {
            for (int64_t i = next++; i < count; i = next++) work(i);
          });
        for (auto& th : pool) th.join();
      }
      export_video_dataset(clips, dir);
    } else {
      std::vector<SceneSample> samples(static_cast<size_t>(count));
      auto work = [&](int64_t i) { samples[size_t(i)] = gen_image(seed_base + uint64_t(i), sc); };
      if (threads <= 1) {
        for (int64_t i = 0; i < count; ++i) work(i);
      } else {
        std::vector<std::thread> pool;
        std::atomic<int64_t> next{0};
        for (int tid = 0; tid < threads; ++tid)
          pool.emplace_back([&]() {
            for (int64_t i = next++; i < count; i = next++) work(i);
          });
        for (auto& th : pool) th.join();
      }
      export_dataset(samples, dir);
    }
  };
  gen_split("train", cfg.data_train_size, cfg.data_seed);
  gen_split("val", cfg.data_val_size, cfg.data_seed + 0x80000000ull);
}

// Renders the loss history into a simple PPM line chart.
inline void write_loss_chart(const std::string& path, const std::vector<double>& losses) {
  int W = 512, H = 256;
  std::vector<uint8_t> img(size_t(W) * H * 3, 255);
  if (!losses.empty()) {
    double lo = 1e300, hi = -1e300;
    for (double v : losses) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (hi <= lo) hi = lo + 1e-9;
    int prev_y = -1;
    for (int x = 0; x < W; ++x) {
      size_t i = size_t(double(x) / W * double(losses.size() - 1) + 0.5);
      i = std::min(i, losses.size() - 1);
      int y = int((1.0 - (losses[i] - lo) / (hi - lo)) * (H - 1));
      int y0 = prev_y < 0 ? y : std::min(prev_y, y);
      int y1 = prev_y < 0 ? y : std::max(prev_y, y);
      for (int yy = y0; yy <= y1; ++yy) {
        size_t p = (size_t(yy) * W + size_t(x)) * 3;
        img[p] = 180;
        img[p + 1] = 30;
        img[p + 2] = 30;
      }
      prev_y = y;
    }
  }
  write_ppm(path, img, H, W);
}

// Two-phase schedule: phase 1 trains the denoiser core plus the register /
// null conditioning, phase 2 freezes those and trains the encoder, temporal
// modules, and adapters.
inline void apply_phase_flags(ParamSet<float>& params, int phase) {
  for (Parameter<float>* p : params.items()) {
    bool adapter = p->name.find(".adapter") != std::string::npos;
    bool denoiser_core = p->name.rfind("denoiser.", 0) == 0 && !adapter;
    bool null_cond = p->name.rfind("null_cond.", 0) == 0;
    bool ae = p->name.rfind("ae.", 0) == 0;
    bool encoder_side = !denoiser_core && !null_cond && !ae;
    if (phase == 1)
      p->trainable = denoiser_core || null_cond;
    else
      p->trainable = encoder_side && !ae;
  }
}

struct TrainResult {
  std::string checkpoint_path;
  std::string loss_log_path;
  double final_loss = 0.0;
  int64_t steps = 0;
};

inline TrainResult train_model(Model<float>& model, const Config& cfg) {
  namespace fs = std::filesystem;
  Dataset train_ds = load_dataset(cfg.io_data_dir + "/train");
  if (train_ds.count() == 0 && cfg.train_steps > 0)
    throw std::runtime_error("train: dataset at " + cfg.io_data_dir + "/train is empty");
  fs::create_directories(cfg.io_out_dir);

  Adam<float> opt(model.params);
  opt.lr = cfg.train_lr;
  opt.warmup_steps = cfg.train_warmup_steps;
  opt.grad_clip = cfg.train_grad_clip;

  std::ofstream log(cfg.io_out_dir + "/loss_log.txt");
  if (!log) throw std::runtime_error("train: cannot write loss log");
  log << std::setprecision(8);

  Rng rng(cfg.train_seed);
  bool latent = cfg.decoder_path == "diffusion" && cfg.decoder_latent_mode;
  bool video = cfg.video();
  int64_t phase_switch = cfg.train_two_phase ? cfg.train_steps / 2 : -1;

  // latent mode: pretrain the autoencoder by pixel MSE, then freeze it
  if (latent && cfg.train_ae_steps > 0 && cfg.train_steps > 0) {
    for (Parameter<float>* p : model.params.items())
      p->trainable = p->name.rfind("ae.", 0) == 0;
    for (int64_t step = 0; step < cfg.train_ae_steps; ++step) {
      std::vector<int64_t> idx;
      for (int b = 0; b < cfg.train_batch; ++b)
        idx.push_back(rng.uniform_int(0, int(train_ds.samples.size()) - 1));
      TensorF batch = batch_images<float>(train_ds, idx);
      Tape<float> t;
      Var<float> loss = model.ae.recon_loss(t, t.input(batch));
      model.params.zero_grads();
      t.backward(loss);
      opt.step();
    }
    for (Parameter<float>* p : model.params.items()) p->trainable = true;
  }
  for (Parameter<float>* p : model.params.items())
    if (p->name.rfind("ae.", 0) == 0) p->trainable = !latent ? p->trainable : false;

  std::vector<double> loss_history;
  Tape<float> tape;
  double last_loss = 0.0;
  for (int64_t step = 0; step < cfg.train_steps; ++step) {
    if (cfg.train_two_phase) apply_phase_flags(model.params, step < phase_switch ? 1 : 2);
    tape.clear();
    Var<float> loss;
    double diff_part = 0.0, guide_part = 0.0;
    if (video) {
      // clips enter one at a time; gradients average across the batch
      Var<float> acc;
      double diff_sum = 0.0;
      for (int b = 0; b < cfg.train_batch; ++b) {
        int64_t clip = rng.uniform_int(0, int(train_ds.count()) - 1);
        TensorF frames({train_ds.L, 3, train_ds.H, train_ds.W});
        for (int f = 0; f < train_ds.L; ++f) {
          const SceneSample& fr = train_ds.frame(clip, f);
          for (int c = 0; c < 3; ++c)
            for (int64_t p = 0; p < int64_t(train_ds.H) * train_ds.W; ++p)
              frames.data[((int64_t(f) * 3 + c) * train_ds.H * train_ds.W) + p] =
                  float(fr.image[size_t(p) * 3 + c]) / 255.0f;
        }
        if (cfg.decoder_path == "broadcast") {
          auto out = broadcast_loss_clip(tape, model, frames, rng);
          acc = b == 0 ? out.loss : add(acc, out.loss);
          diff_sum += double(scalar_value(out.loss));
        } else {
          auto out = one_frame_step(tape, model, frames, rng, step);
          acc = b == 0 ? out.loss : add(acc, out.loss);
          diff_sum += double(scalar_value(out.diffusion_term));
        }
      }
      loss = scale(acc, 1.0f / float(cfg.train_batch));
      diff_part = diff_sum / cfg.train_batch;
      guide_part = double(scalar_value(loss)) - diff_part;
      if (std::abs(guide_part) < 1e-12) guide_part = 0.0;
    } else {
      std::vector<int64_t> idx;
      for (int b = 0; b < cfg.train_batch; ++b)
        idx.push_back(rng.uniform_int(0, int(train_ds.samples.size()) - 1));
      TensorF batch = batch_images<float>(train_ds, idx);
      if (cfg.decoder_path == "broadcast") {
        auto out = broadcast_loss_images(tape, model, batch, rng);
        loss = out.loss;
        diff_part = double(scalar_value(loss));
      } else {
        auto out = diffusion_loss_images(tape, model, batch, rng, step);
        loss = out.loss;
        diff_part = double(scalar_value(out.diffusion_term));
        guide_part = out.guidance_term.valid()
                         ? double(scalar_value(out.guidance_term)) * model.gcfg.lambda
                         : 0.0;
      }
    }
    last_loss = double(scalar_value(loss));
    if (!std::isfinite(last_loss)) {
      log.flush();
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) +
                               " (diffusion=" + std::to_string(diff_part) +
                               ", guidance=" + std::to_string(guide_part) + ")");
    }
    model.params.zero_grads();
    tape.backward(loss);
    opt.step();
    log << step << " " << last_loss << " " << diff_part << " " << guide_part << "\n";
    loss_history.push_back(last_loss);
    if (cfg.io_checkpoint_every > 0 && (step + 1) % cfg.io_checkpoint_every == 0 &&
        step + 1 < cfg.train_steps) {
      checkpoint_save(cfg.io_out_dir + "/ckpt_" + std::to_string(step + 1) + ".sdcp", cfg,
                      step + 1, model.params, &opt);
    }
  }
  for (Parameter<float>* p : model.params.items()) p->trainable = true;

  TrainResult r;
  r.steps = cfg.train_steps;
  r.final_loss = last_loss;
  r.checkpoint_path = cfg.io_out_dir + "/ckpt_final.sdcp";
  r.loss_log_path = cfg.io_out_dir + "/loss_log.txt";
  checkpoint_save(r.checkpoint_path, cfg, cfg.train_steps, model.params, &opt);
  log.close();
  write_loss_chart(cfg.io_out_dir + "/loss_curve.ppm", loss_history);
  return r;
}

}  // namespace slotdiff
