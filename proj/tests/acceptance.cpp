// Acceptance suite: one test case per criterion, each printing a single
// pass/fail line. Training-based criteria cache their artifacts under the
// work directory (ACCEPTANCE_WORK_DIR, default ./acceptance_work) so reruns
// and the dependent criteria reuse checkpoints instead of retraining.

#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include "slotdiff/eval.hpp"
#include "slotdiff/grad_check.hpp"
#include "slotdiff/train.hpp"

#include "oracles.hpp"

using namespace slotdiff;

namespace {
namespace fs = std::filesystem;

std::string work_dir() {
  const char* env = std::getenv("ACCEPTANCE_WORK_DIR");
  std::string dir = env != nullptr ? env : "acceptance_work";
  fs::create_directories(dir);
  return dir;
}

void report(int n, bool pass, const std::string& what) {
  std::printf("criterion %d: %s - %s\n", n, pass ? "PASS" : "FAIL", what.c_str());
  std::fflush(stdout);
  CHECK_MESSAGE(pass, "criterion " << n << ": " << what);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

// --- shared desk-scale configurations (must mirror the frozen baselines) ---

Config image_dataset_cfg() {
  Config cfg;
  cfg.data_min_objects = 2;
  cfg.data_max_objects = 2;
  // sprites span several attention patches; sub-patch objects cannot be
  // segmented at the 8x8 grid the encoder masks live on
  cfg.data_scale_min = 64;
  cfg.data_scale_max = 110;
  cfg.data_train_size = 2000;
  cfg.data_val_size = 200;
  cfg.io_data_dir = work_dir() + "/ds_img";
  return cfg;
}

Config broadcast_cfg() {
  Config cfg = image_dataset_cfg();
  cfg.decoder_path = "broadcast";
  // the pose-aware encoder: slots lock onto object blobs, which the
  // pose-free variant only manages with far more training than desk scale
  // affords (see the ledgered baseline sweep)
  cfg.encoder_variant = "isa";
  cfg.train_steps = 10000;
  cfg.train_batch = 4;
  cfg.io_checkpoint_every = 0;
  cfg.io_out_dir = work_dir() + "/bc6";
  return cfg;
}

Config diffusion_cfg(const std::string& guidance) {
  Config cfg = image_dataset_cfg();
  cfg.decoder_path = "diffusion";
  cfg.encoder_variant = "isa";  // see broadcast_cfg
  cfg.guidance_mode = guidance;
  cfg.train_steps = 20000;
  cfg.train_batch = 2;
  cfg.io_checkpoint_every = 0;
  cfg.io_out_dir = work_dir() + "/diff_" + guidance;
  return cfg;
}

Config video_cfg() {
  Config cfg;
  cfg.data_min_objects = 1;
  cfg.data_max_objects = 1;
  cfg.data_train_size = 2000;
  cfg.data_val_size = 200;
  cfg.data_scale_min = 40;
  cfg.data_scale_max = 80;
  cfg.data_speed_max = 12;
  cfg.temporal_mode = "v1";
  cfg.encoder_variant = "isa";
  cfg.decoder_path = "broadcast";
  cfg.train_steps = 10000;
  cfg.train_batch = 2;
  cfg.io_checkpoint_every = 0;
  cfg.io_data_dir = work_dir() + "/ds_vid";
  cfg.io_out_dir = work_dir() + "/vid9";
  return cfg;
}

void ensure_dataset(const Config& cfg) {
  if (!fs::exists(cfg.io_data_dir + "/train/manifest.txt")) generate_dataset(cfg);
}

// Build the model; load the cached checkpoint if present, else train and
// cache. Training runs are deterministic so cached and fresh runs agree.
std::unique_ptr<Model<float>> ensure_model(const Config& cfg) {
  ensure_dataset(cfg);
  auto model = std::make_unique<Model<float>>();
  model->build(cfg);
  std::string ckpt = cfg.io_out_dir + "/ckpt_final.sdcp";
  if (fs::exists(ckpt)) {
    checkpoint_load(ckpt, model->params);
  } else {
    train_model(*model, cfg);
  }
  return model;
}

TensorF sample_to_x01(const SceneSample& s) { return s.image_chw(); }

}  // namespace

// ===========================================================================

TEST_CASE("criterion01") {
  bool pass = true;
  double worst = 0.0;
  auto track = [&](double err) {
    worst = std::max(worst, err);
    if (err > 1e-5) pass = false;
  };

  // --- Eqs 2.1-2.8: one slot-attention iteration vs a loop oracle ---------
  {
    Rng rng(11);
    ParamSet<double> ps;
    SlotAttentionParams<double> p;
    p.init(3, 5, 4, 4, 1, rng, ps, "sa");
    p.mean_aggregation = false;  // literal U = W^T V
    TensorD slots = TensorD::randn({3, 4}, rng);
    TensorD feats = TensorD::randn({6, 5}, rng);
    Tape<double> t;
    auto st = slot_attention_step(t, t.input(slots), t.input(feats), p);

    auto ln = [](std::vector<double> row) {
      double mu = 0, var = 0;
      for (double v : row) mu += v;
      mu /= double(row.size());
      for (double v : row) var += (v - mu) * (v - mu);
      var /= double(row.size());
      double istd = 1.0 / std::sqrt(var + 1e-5);
      for (auto& v : row) v = (v - mu) * istd;
      return row;
    };
    // oracle: LN, projections, scaled logits, softmax over slots, U, GRU
    std::vector<std::vector<double>> K(6), V(6), Q(3);
    for (int i = 0; i < 6; ++i) {
      std::vector<double> row(5);
      for (int c = 0; c < 5; ++c) row[size_t(c)] = feats.at(i, c);
      auto n = ln(row);
      K[size_t(i)].assign(4, 0.0);
      V[size_t(i)].assign(4, 0.0);
      for (int c = 0; c < 4; ++c)
        for (int d = 0; d < 5; ++d) {
          K[size_t(i)][size_t(c)] += n[size_t(d)] * p.wk.w.value.at(d, c);
          V[size_t(i)][size_t(c)] += n[size_t(d)] * p.wv.w.value.at(d, c);
        }
    }
    for (int j = 0; j < 3; ++j) {
      std::vector<double> row(4);
      for (int c = 0; c < 4; ++c) row[size_t(c)] = slots.at(j, c);
      auto n = ln(row);
      Q[size_t(j)].assign(4, 0.0);
      for (int c = 0; c < 4; ++c)
        for (int d = 0; d < 4; ++d) Q[size_t(j)][size_t(c)] += n[size_t(d)] * p.wq.w.value.at(d, c);
    }
    std::vector<std::vector<double>> W(6);
    for (int i = 0; i < 6; ++i) {
      std::vector<double> logits(3);
      for (int j = 0; j < 3; ++j) {
        double dot = 0;
        for (int c = 0; c < 4; ++c) dot += K[size_t(i)][size_t(c)] * Q[size_t(j)][size_t(c)];
        logits[size_t(j)] = dot / 2.0;  // sqrt(D_k) = 2
      }
      W[size_t(i)] = oracle::softmax(logits);
      for (int j = 0; j < 3; ++j)
        track(std::abs(t.val(st.attn).at(i, j) - W[size_t(i)][size_t(j)]));
    }
    for (int j = 0; j < 3; ++j) {
      std::vector<double> u(4, 0.0), h(4);
      for (int i = 0; i < 6; ++i)
        for (int c = 0; c < 4; ++c) u[size_t(c)] += W[size_t(i)][size_t(j)] * V[size_t(i)][size_t(c)];
      for (int c = 0; c < 4; ++c) h[size_t(c)] = slots.at(j, c);
      auto next = oracle::gru_step(h, u, p.gru.wz.value.data, p.gru.bz.value.data,
                                   p.gru.wr.value.data, p.gru.br.value.data, p.gru.wh.value.data,
                                   p.gru.bh.value.data);
      for (int c = 0; c < 4; ++c)
        track(std::abs(t.val(st.slots).at(j, c) - next[size_t(c)]) /
              std::max(1.0, std::abs(next[size_t(c)])));
    }
  }

  // --- Eq 2.9: alpha compositing vs direct loops --------------------------
  {
    Rng rng(13);
    Tape<double> t;
    PerSlotRenderVars<double> r;
    r.batch = 1;
    r.num_slots = 3;
    TensorD rgb = TensorD::randn({3, 3, 4, 4}, rng, 0.2);
    TensorD logits = TensorD::randn({3, 1, 4, 4}, rng);
    r.rgb = t.input(rgb);
    r.alpha_logits = t.input(logits);
    auto c = alpha_composite(t, r);
    for (int p = 0; p < 16; ++p) {
      std::vector<double> lg(3);
      for (int k = 0; k < 3; ++k) lg[size_t(k)] = logits.data[size_t(k) * 16 + size_t(p)];
      auto m = oracle::softmax(lg);
      for (int ch = 0; ch < 3; ++ch) {
        double acc = 0;
        for (int k = 0; k < 3; ++k) acc += m[size_t(k)] * rgb.data[(size_t(k) * 3 + ch) * 16 + size_t(p)];
        acc = std::min(1.0, std::max(0.0, acc));
        track(std::abs(t.val(c.image).data[size_t(ch) * 16 + size_t(p)] - acc));
      }
      double s = 0;
      for (int k = 0; k < 3; ++k) s += t.val(c.masks).at(k, p);
      track(std::abs(s - 1.0));
    }
  }

  // --- Eqs 2.17-2.23: schedule, closed-form noising, posterior mean -------
  {
    NoiseSchedule s = make_schedule(24, 1e-3, 0.09);
    double acc = 1.0;
    for (int t = 0; t < 24; ++t) {
      double beta = 1e-3 + (0.09 - 1e-3) * t / 23.0;
      track(std::abs(s.beta[size_t(t)] - beta));
      acc *= 1.0 - beta;
      track(std::abs(s.alpha_bar[size_t(t)] - acc));
    }
    Rng rng(17);
    for (int rep = 0; rep < 30; ++rep) {
      int t = rng.uniform_int(0, 23);
      double x0 = rng.normal(), eps = rng.normal();
      TensorD xt = q_sample(TensorD::scalar(x0), t, TensorD::scalar(eps), s);
      double ab = s.alpha_bar[size_t(t)];
      track(std::abs(xt[0] - (std::sqrt(ab) * x0 + std::sqrt(1 - ab) * eps)));
      // Eq 2.22 and its identity with Eq 2.21
      TensorD mu = posterior_mean(xt, t, TensorD::scalar(eps), s);
      double expect22 = (xt[0] - s.beta[size_t(t)] / std::sqrt(1 - ab) * eps) /
                        std::sqrt(s.alpha[size_t(t)]);
      track(std::abs(mu[0] - expect22));
      double ab_prev = t == 0 ? 1.0 : s.alpha_bar[size_t(t - 1)];
      double mu21 = std::sqrt(ab_prev) * s.beta[size_t(t)] / (1 - ab) * x0 +
                    std::sqrt(s.alpha[size_t(t)]) * (1 - ab_prev) / (1 - ab) * xt[0];
      track(std::abs(mu[0] - mu21));
    }
    // Eq 2.23: the loss is the mean squared noise-prediction error
    Rng rng2(19);
    ParamSet<double> ps;
    NullConditioning<double> nc;
    nc.init(4, 4, rng2, ps, "n");
    TensorD x0 = TensorD::randn({2, 1, 4, 4}, rng2);
    TensorD seen_xt;
    std::vector<int> seen_ts;
    DenoiserFn<double> zero_fn = [&](Tape<double>& t, Var<double> x_t, const std::vector<int>& ts,
                                     const std::vector<CondVars<double>>&) {
      seen_xt = t.val(x_t);
      seen_ts = ts;
      return DenoiseOut<double>{t.input(TensorD(t.val(x_t).shape)), {}, 0, 0};
    };
    Tape<double> t;
    Rng step_rng(5);
    std::vector<CondVars<double>> conds(2, nc.vars(t));
    auto out = diffusion_loss(t, zero_fn, nc, x0, conds, s, step_rng, 0.0);
    double expect = 0;
    for (int b = 0; b < 2; ++b) {
      double ab = s.alpha_bar[size_t(seen_ts[size_t(b)])];
      for (int i = 0; i < 16; ++i) {
        double eps = (seen_xt[b * 16 + i] - std::sqrt(ab) * x0[b * 16 + i]) / std::sqrt(1 - ab);
        expect += eps * eps;
      }
    }
    expect /= 32.0;
    track(std::abs(scalar_value(out.loss) - expect) / std::max(1.0, expect));
  }

  // --- Eqs 4.2-4.4: guidance BCE and the weighted total -------------------
  {
    Rng rng(23);
    Tape<double> t;
    TensorD sa_raw = TensorD::randn({4, 2}, rng);
    TensorD dm_raw = TensorD::randn({2, 4}, rng);
    Var<double> a_sa = softmax(t.input(sa_raw), 1);
    Var<double> a_dm = softmax(t.input(dm_raw), 0);
    Var<double> g = guidance_loss(t, a_sa, a_dm, 2, 2, 2, 2, GuidanceMode::Joint);
    // oracle: same-resolution resize is the identity, BCE(target, pred^T)
    double expect = 0;
    for (int i = 0; i < 4; ++i)
      for (int k = 0; k < 2; ++k) {
        double target = t.val(a_sa).at(i, k);
        double pred = std::min(1 - 1e-7, std::max(1e-7, t.val(a_dm).at(k, i)));
        expect -= target * std::log(pred) + (1 - target) * std::log(1 - pred);
      }
    expect /= 8.0;
    track(std::abs(scalar_value(g) - expect) / std::max(1.0, expect));
    GuidanceConfig gc;
    gc.mode = GuidanceMode::Joint;
    gc.lambda = 0.37;
    Var<double> total = total_loss(t, t.input(TensorD::scalar(1.25)), g, gc, 10);
    track(std::abs(scalar_value(total) - (1.25 + 0.37 * expect)));
  }

  // --- Eqs 5.1-5.5: one ISA iteration vs a loop oracle --------------------
  {
    Rng rng(29);
    ParamSet<double> ps;
    IsaParams<double> p;
    p.init(2, 4, 3, 3, 1, rng, ps, "isa");
    TensorD feats = TensorD::randn({4, 4}, rng);
    TensorD grid = from_rows<double>({{-0.6, -0.2}, {0.4, -0.8}, {-0.1, 0.5}, {0.7, 0.6}});
    TensorD slots = TensorD::randn({2, 3}, rng);
    TensorD pos = from_rows<double>({{0.1, -0.2}, {-0.3, 0.4}});
    TensorD scl = from_rows<double>({{0.5, 0.7}, {0.9, 0.6}});
    Tape<double> t;
    IsaStateVars<double> st{t.input(slots), t.input(pos), t.input(scl), Var<double>{}};
    auto next = isa_step(t, st, t.input(feats), t.input(grid), p);

    auto ln = [](std::vector<double> row) {
      double mu = 0, var = 0;
      for (double v : row) mu += v;
      mu /= double(row.size());
      for (double v : row) var += (v - mu) * (v - mu);
      var /= double(row.size());
      double istd = 1.0 / std::sqrt(var + 1e-5);
      for (auto& v : row) v = (v - mu) * istd;
      return row;
    };
    // keys from LN(f), values from LN(f)
    std::vector<std::vector<double>> kf(4), vf(4);
    for (int i = 0; i < 4; ++i) {
      std::vector<double> row(4);
      for (int c = 0; c < 4; ++c) row[size_t(c)] = feats.at(i, c);
      auto n = ln(row);
      kf[size_t(i)].assign(3, 0.0);
      vf[size_t(i)].assign(3, 0.0);
      for (int c = 0; c < 3; ++c)
        for (int d = 0; d < 4; ++d) {
          kf[size_t(i)][size_t(c)] += n[size_t(d)] * p.proj_k.w.value.at(d, c);
          vf[size_t(i)][size_t(c)] += n[size_t(d)] * p.proj_v.w.value.at(d, c);
        }
    }
    // logits per slot: p(k(f) + g(G_rel_j)) . q(LN(s_j)) / sqrt(d)
    std::vector<std::vector<double>> M(2, std::vector<double>(4));
    for (int j = 0; j < 2; ++j) {
      std::vector<double> srow(3);
      for (int c = 0; c < 3; ++c) srow[size_t(c)] = slots.at(j, c);
      auto sn = ln(srow);
      std::vector<double> q(3, 0.0);
      for (int c = 0; c < 3; ++c)
        for (int d = 0; d < 3; ++d) q[size_t(c)] += sn[size_t(d)] * p.proj_q.w.value.at(d, c);
      for (int i = 0; i < 4; ++i) {
        double grel[2] = {(grid.at(i, 0) - pos.at(j, 0)) / scl.at(j, 0),
                          (grid.at(i, 1) - pos.at(j, 1)) / scl.at(j, 1)};
        std::vector<double> sum(3, 0.0);
        for (int c = 0; c < 3; ++c) {
          sum[size_t(c)] = kf[size_t(i)][size_t(c)] + grel[0] * p.proj_g.w.value.at(0, c) +
                           grel[1] * p.proj_g.w.value.at(1, c);
        }
        std::vector<double> kaug(3, 0.0);
        for (int c = 0; c < 3; ++c)
          for (int d = 0; d < 3; ++d) kaug[size_t(c)] += sum[size_t(d)] * p.proj_p.w.value.at(d, c);
        double dot = 0;
        for (int c = 0; c < 3; ++c) dot += kaug[size_t(c)] * q[size_t(c)];
        M[size_t(j)][size_t(i)] = dot / std::sqrt(3.0);
      }
    }
    // softmax over slots per feature, then pose updates (5.4, 5.5)
    std::vector<std::vector<double>> A(2, std::vector<double>(4));
    for (int i = 0; i < 4; ++i) {
      auto w = oracle::softmax({M[0][size_t(i)], M[1][size_t(i)]});
      A[0][size_t(i)] = w[0];
      A[1][size_t(i)] = w[1];
      track(std::abs(t.val(next.attn).at(0, i) - w[0]));
      track(std::abs(t.val(next.attn).at(1, i) - w[1]));
    }
    for (int j = 0; j < 2; ++j) {
      double tot = 0;
      for (int i = 0; i < 4; ++i) tot += A[size_t(j)][size_t(i)];
      for (int axis = 0; axis < 2; ++axis) {
        double mean = 0;
        for (int i = 0; i < 4; ++i) mean += A[size_t(j)][size_t(i)] * grid.at(i, axis);
        mean /= tot;
        track(std::abs(t.val(next.pos).at(j, axis) - mean));
        double var = 0;
        for (int i = 0; i < 4; ++i) {
          double d = grid.at(i, axis) - mean;
          var += A[size_t(j)][size_t(i)] * d * d;
        }
        var /= tot;
        double sd = std::max(double(p.scale_floor), std::sqrt(var));
        track(std::abs(t.val(next.scale).at(j, axis) - sd) / std::max(1.0, sd));
      }
    }
  }

  // --- Eqs 5.6-5.8: temporal aggregation vs a 1-layer transformer oracle --
  {
    Rng rng(31);
    ParamSet<double> ps;
    TemporalParams<double> tp;
    tp.heads = 1;
    tp.depth = 1;
    tp.init(3, 4, rng, ps, "tp");
    TensorD f0 = TensorD::randn({2, 3}, rng), f1 = TensorD::randn({2, 3}, rng);
    Tape<double> t;
    auto agg = aggregate_slots(t, {t.input(f0), t.input(f1)}, tp);

    auto ln = [](std::vector<double> row, const Parameter<double>& gain,
                 const Parameter<double>& bias) {
      double mu = 0, var = 0;
      for (double v : row) mu += v;
      mu /= double(row.size());
      for (double v : row) var += (v - mu) * (v - mu);
      var /= double(row.size());
      double istd = 1.0 / std::sqrt(var + 1e-5);
      std::vector<double> out(row.size());
      for (size_t c = 0; c < row.size(); ++c)
        out[c] = (row[c] - mu) * istd * gain.value[int64_t(c)] + bias.value[int64_t(c)];
      return out;
    };
    auto matvec = [](const std::vector<double>& v, const Parameter<double>& w) {
      int out_dim = w.value.shape[1];
      std::vector<double> y(size_t(out_dim), 0.0);
      for (int c = 0; c < out_dim; ++c)
        for (size_t d = 0; d < v.size(); ++d) y[size_t(c)] += v[d] * w.value.at(int(d), c);
      return y;
    };
    const TransformerLayer<double>& L = tp.slot_agg.layers[0];
    // tokens with positional embeddings: 4 tokens of width 3
    std::vector<std::vector<double>> x(4, std::vector<double>(3));
    for (int j = 0; j < 2; ++j)
      for (int c = 0; c < 3; ++c) {
        x[size_t(j)][size_t(c)] = f0.at(j, c) + tp.slot_pos.value.at(0, c);
        x[size_t(j + 2)][size_t(c)] = f1.at(j, c) + tp.slot_pos.value.at(1, c);
      }
    // pre-norm self-attention
    std::vector<std::vector<double>> a(4), q(4), k(4), v(4);
    for (int i = 0; i < 4; ++i) {
      a[size_t(i)] = ln(x[size_t(i)], L.n1.gain, L.n1.bias);
      q[size_t(i)] = matvec(a[size_t(i)], L.attn.wq.w);
      k[size_t(i)] = matvec(a[size_t(i)], L.attn.wk.w);
      v[size_t(i)] = matvec(a[size_t(i)], L.attn.wv.w);
    }
    std::vector<std::vector<double>> after_attn(4);
    for (int i = 0; i < 4; ++i) {
      std::vector<double> logits(4);
      for (int jj = 0; jj < 4; ++jj) {
        double dot = 0;
        for (int c = 0; c < 3; ++c) dot += q[size_t(i)][size_t(c)] * k[size_t(jj)][size_t(c)];
        logits[size_t(jj)] = dot / std::sqrt(3.0);
      }
      auto w = oracle::softmax(logits);
      std::vector<double> o(3, 0.0);
      for (int jj = 0; jj < 4; ++jj)
        for (int c = 0; c < 3; ++c) o[size_t(c)] += w[size_t(jj)] * v[size_t(jj)][size_t(c)];
      auto proj = matvec(o, L.attn.wo.w);
      after_attn[size_t(i)].resize(3);
      for (int c = 0; c < 3; ++c)
        after_attn[size_t(i)][size_t(c)] = x[size_t(i)][size_t(c)] + proj[size_t(c)] +
                                           L.attn.wo.b.value[c];
    }
    for (int i = 0; i < 4; ++i) {
      auto b = ln(after_attn[size_t(i)], L.n2.gain, L.n2.bias);
      auto h1 = matvec(b, L.mlp.fc1.w);
      for (size_t c = 0; c < h1.size(); ++c)
        h1[c] = std::max(0.0, h1[c] + L.mlp.fc1.b.value[int64_t(c)]);
      auto h2 = matvec(h1, L.mlp.fc2.w);
      for (int c = 0; c < 3; ++c) {
        double expect = after_attn[size_t(i)][size_t(c)] + h2[size_t(c)] + L.mlp.fc2.b.value[c];
        double got = t.val(agg[size_t(i / 2)]).at(i % 2, c);
        track(std::abs(got - expect) / std::max(1.0, std::abs(expect)));
      }
    }
    // Eq 5.7 exact concatenation
    Var<double> aug = augment(t.input(f0), agg[0]);
    for (int j = 0; j < 2; ++j)
      for (int c = 0; c < 3; ++c) {
        track(std::abs(t.val(aug).at(j, c) - f0.at(j, c)));
        track(std::abs(t.val(aug).at(j, 3 + c) - t.val(agg[0]).at(j, c)));
      }
    // Eq 5.8 mean pooling
    auto regs = aggregate_registers(t, {t.input(f0), t.input(f1)}, tp);
    for (int c = 0; c < 3; ++c) {
      double mean = (f0.at(0, c) + f0.at(1, c)) / 2.0;
      track(std::abs(t.val(regs.per_frame[0])[c] - mean));
    }
  }

  // --- Eqs 5.10-5.16: explicit pose fusion vs a loop oracle ---------------
  {
    Rng rng(37);
    ParamSet<double> ps;
    TemporalParams<double> tp;
    tp.heads = 1;
    tp.depth = 1;
    tp.init(3, 4, rng, ps, "tp");
    TensorD grid = from_rows<double>({{-0.5, -0.5}, {0.5, -0.5}, {-0.5, 0.5}, {0.5, 0.5}});
    TensorD slots = TensorD::randn({2, 3}, rng);
    TensorD pos = from_rows<double>({{0.2, -0.1}, {-0.4, 0.3}});
    TensorD scl = from_rows<double>({{0.6, 0.5}, {0.8, 0.4}});
    Tape<double> t;
    // pre-aggregation fused value, matching Eqs 5.11-5.15
    for (int j = 0; j < 2; ++j) {
      IsaStateVars<double> st{t.input(slots), t.input(pos), t.input(scl), Var<double>{}};
      Var<double> grel = relative_grid(t, t.input(grid), st.pos, st.scale, j);
      Var<double> pooled = mean_rows(tp.grid_proj_h(t, grel));
      Var<double> fused = relu(tp.fuse_norm(t, add(row(st.slots, j), pooled)));
      // oracle
      std::vector<double> pool(3, 0.0);
      for (int i = 0; i < 4; ++i) {
        double gx = (grid.at(i, 0) - pos.at(j, 0)) / scl.at(j, 0);
        double gy = (grid.at(i, 1) - pos.at(j, 1)) / scl.at(j, 1);
        for (int c = 0; c < 3; ++c)
          pool[size_t(c)] += (gx * tp.grid_proj_h.w.value.at(0, c) +
                              gy * tp.grid_proj_h.w.value.at(1, c)) /
                             4.0;
      }
      std::vector<double> pj(3);
      for (int c = 0; c < 3; ++c) pj[size_t(c)] = slots.at(j, c) + pool[size_t(c)];
      double mu = (pj[0] + pj[1] + pj[2]) / 3.0;
      double var = 0;
      for (double vv : pj) var += (vv - mu) * (vv - mu);
      var /= 3.0;
      double istd = 1.0 / std::sqrt(var + 1e-5);
      for (int c = 0; c < 3; ++c) {
        double lnv = (pj[size_t(c)] - mu) * istd * tp.fuse_norm.gain.value[c] +
                     tp.fuse_norm.bias.value[c];
        double expect = std::max(0.0, lnv);
        track(std::abs(t.val(fused)[c] - expect) / std::max(1.0, std::abs(expect)));
      }
    }
  }

  report(1, pass, "equation fidelity, worst relative error " + fmt(worst));
}

// ===========================================================================

TEST_CASE("criterion02") {
  struct Row {
    const char* name;
    double err;
  };
  std::vector<Row> rows;
  const double eps = 1e-6;
  {
    Rng rng(31);
    ParamSet<double> ps;
    SlotAttentionParams<double> p;
    p.init(2, 8, 8, 8, 2, rng, ps, "sa");
    TensorD feats = TensorD::randn({8, 8}, rng, 0.5);
    rows.push_back({"slot_attention", grad_check<double>(ps, [&](Tape<double>& t) {
                      Rng r(7);
                      auto st = slot_attention(t, t.input(feats), p, r);
                      return add(sum_all(square(st.slots)), sum_all(square(st.attn)));
                    }, eps)});
  }
  {
    Rng rng(37);
    ParamSet<double> ps;
    IsaParams<double> p;
    p.init(2, 6, 6, 6, 2, rng, ps, "isa");
    TensorD feats = TensorD::randn({9, 6}, rng, 0.5);
    TensorD grid = patch_grid<double>(3, 3);
    rows.push_back({"isa", grad_check<double>(ps, [&](Tape<double>& t) {
                      Rng r(7);
                      auto st = isa(t, t.input(feats), t.input(grid), p, r);
                      return add(add(sum_all(square(st.slots)), sum_all(square(st.pos))),
                                 sum_all(square(st.scale)));
                    }, eps)});
  }
  {
    Rng rng(101);
    ParamSet<double> ps;
    Backbone<double> bb;
    bb.init(6, 8, 8, rng, ps, "bb");
    SlotAttentionParams<double> sa;
    sa.init(2, 6, 6, 6, 2, rng, ps, "sa");
    BroadcastDecoderParams<double> dec;
    dec.init(6, 8, 8, false, rng, ps, "dec", 6);
    TensorD img = TensorD::randn({1, 3, 8, 8}, rng, 0.3);
    for (auto& v : img.data) v = std::min(1.0, std::max(0.0, v + 0.5));
    rows.push_back({"broadcast_decoder", grad_check<double>(ps, [&](Tape<double>& t) {
                      Rng r(11);
                      Var<double> iv = t.input(img);
                      auto st = slot_attention(t, bb(t, iv), sa, r);
                      auto render = decode_slots(t, dec, st.slots, 1);
                      return recon_loss(t, alpha_composite(t, render), iv);
                    }, eps)});
  }
  {
    Rng rng(53);
    ParamSet<double> ps;
    MiniDenoiser<double> den;
    DenoiserConfig dc;
    dc.in_channels = 3;
    dc.c1 = dc.c2 = dc.c3 = 8;
    dc.d_attn = 8;
    dc.heads = 2;
    dc.temb_dim = 8;
    dc.temb_hidden = 16;
    dc.d_cond_slots = dc.d_cond_reg = 8;
    den.init(dc, rng, ps, "den");
    for (auto* pair : {&den.at_d1, &den.at_d2, &den.at_u1, &den.at_u2})
      for (auto& v : pair->adapter.wo.w.value.data) v = 0.03;
    NullConditioning<double> nc;
    nc.init(8, 8, rng, ps, "null");
    NoiseSchedule sched = make_schedule(6, 1e-2, 0.2);
    TensorD x0 = TensorD::randn({1, 3, 8, 8}, rng, 0.4);
    TensorD slots_raw = TensorD::randn({2, 8}, rng);
    rows.push_back({"denoiser_both_paths", grad_check<double>(ps, [&](Tape<double>& t) {
                      Rng r(3);
                      std::vector<CondVars<double>> conds{cond_from_slots(t, t.input(slots_raw))};
                      return diffusion_loss(t, denoiser_fn(den), nc, x0, conds, sched, r, 0.0)
                          .loss;
                    }, eps)});
  }
  {
    Rng rng(61);
    ParamSet<double> ps;
    TemporalParams<double> tp;
    tp.heads = 2;
    tp.init(6, 4, rng, ps, "tmp");
    std::vector<TensorD> frames;
    for (int f = 0; f < 3; ++f) frames.push_back(TensorD::randn({2, 6}, rng, 0.5));
    rows.push_back({"temporal_aggregators", grad_check<double>(ps, [&](Tape<double>& t) {
                      std::vector<Var<double>> per_frame;
                      for (auto& fr : frames) per_frame.push_back(t.input(fr));
                      auto agg = aggregate_slots(t, per_frame, tp);
                      Var<double> loss = sum_all(square(augment(per_frame[0], agg[0])));
                      auto regs = aggregate_registers(t, per_frame, tp);
                      return add(loss, sum_all(square(regs.aggregated[2])));
                    }, eps)});
  }
  {
    Rng rng(67);
    ParamSet<double> ps;
    TemporalParams<double> tp;
    tp.heads = 2;
    tp.init(6, 4, rng, ps, "tmp");
    ParamSet<double> ps_isa;
    IsaParams<double> ip;
    ip.init(2, 6, 6, 6, 1, rng, ps_isa, "isa");
    TensorD feats = TensorD::randn({4, 6}, rng, 0.5);
    TensorD grid = patch_grid<double>(2, 2);
    rows.push_back({"v2_pose_fusion", grad_check<double>(ps, [&](Tape<double>& t) {
                      Rng r(5);
                      std::vector<IsaStateVars<double>> states;
                      states.push_back(isa(t, t.input(feats), t.input(grid), ip, r));
                      states.push_back(isa(t, t.input(feats), t.input(grid), ip, r));
                      auto fused = fuse_pose_v2(t, states, t.input(grid), tp);
                      return add(sum_all(square(fused.fused[1])),
                                 sum_all(square(fused.register_token[0])));
                    }, eps)});
  }
  bool pass = true;
  std::string detail;
  for (const auto& r : rows) {
    if (r.err >= 1e-4) pass = false;
    detail += std::string(r.name) + "=" + fmt(r.err) + " ";
  }
  report(2, pass, "gradient checks: " + detail);
}

// ===========================================================================

TEST_CASE("criterion03") {
  Rng rng(301);
  bool pass = true;
  // 1000 random inputs split across the four normalization contracts
  // (a) slot attention column stochasticity (Eq 2.6)
  {
    ParamSet<float> ps;
    SlotAttentionParams<float> p;
    p.init(3, 6, 6, 6, 1, rng, ps, "sa");
    for (int rep = 0; rep < 250 && pass; ++rep) {
      Tape<float> t;
      auto st = slot_attention_step(t, t.input(TensorF::randn({3, 6}, rng, 2.0)),
                                    t.input(TensorF::randn({7, 6}, rng, 2.0)), p);
      for (int i = 0; i < 7; ++i) {
        double s = 0;
        for (int j = 0; j < 3; ++j) s += t.val(st.attn).at(i, j);
        if (std::abs(s - 1.0) > 1e-6) pass = false;
      }
    }
  }
  // (b) ISA column stochasticity (Eq 5.3)
  {
    ParamSet<float> ps;
    IsaParams<float> p;
    p.init(3, 6, 6, 6, 1, rng, ps, "isa");
    TensorF grid = patch_grid<float>(2, 3);
    for (int rep = 0; rep < 250 && pass; ++rep) {
      Tape<float> t;
      Rng r(rep);
      auto st = isa(t, t.input(TensorF::randn({6, 6}, rng, 2.0)), t.input(grid), p, r);
      for (int i = 0; i < 6; ++i) {
        double s = 0;
        for (int j = 0; j < 3; ++j) s += t.val(st.attn).at(j, i);
        if (std::abs(s - 1.0) > 1e-6) pass = false;
      }
    }
  }
  // (c) compositing mask sums (Eq 2.9)
  {
    for (int rep = 0; rep < 250 && pass; ++rep) {
      Tape<float> t;
      PerSlotRenderVars<float> r;
      r.batch = 1;
      r.num_slots = 4;
      r.rgb = t.input(TensorF::randn({4, 3, 4, 4}, rng));
      r.alpha_logits = t.input(TensorF::randn({4, 1, 4, 4}, rng, 5.0));
      auto c = alpha_composite(t, r);
      for (int p2 = 0; p2 < 16; ++p2) {
        double s = 0;
        for (int k = 0; k < 4; ++k) s += t.val(c.masks).at(k, p2);
        if (std::abs(s - 1.0) > 1e-6) pass = false;
      }
    }
  }
  // (d) cross-attention row sums per head (Eq 2.25)
  {
    ParamSet<float> ps;
    CrossAttention<float> att;
    att.init(6, 5, 8, 4, rng, ps, "att");
    for (int rep = 0; rep < 250 && pass; ++rep) {
      Tape<float> t;
      auto r = att(t, t.input(TensorF::randn({5, 6}, rng, 2.0)),
                   t.input(TensorF::randn({4, 5}, rng, 2.0)));
      for (int i = 0; i < 5; ++i) {
        double s = 0;
        for (int j = 0; j < 4; ++j) s += t.val(r.attn_mean).at(i, j);
        if (std::abs(s - 1.0) > 1e-6) pass = false;
      }
    }
  }
  report(3, pass, "normalization invariants on 1000 random inputs at 1e-6");
}

// ===========================================================================

TEST_CASE("criterion04") {
  bool pass = true;
  std::string detail;
  // hungarian vs brute force, 1000 random matrices with n,m <= 6
  {
    Rng rng(401);
    int bad = 0;
    for (int rep = 0; rep < 1000; ++rep) {
      int n = rng.uniform_int(1, 6), m = rng.uniform_int(1, 6);
      std::vector<std::vector<double>> cost(static_cast<size_t>(n),
                                            std::vector<double>(static_cast<size_t>(m)));
      for (auto& row : cost)
        for (auto& c : row) c = double(rng.uniform_int(0, 8));
      if (hungarian(cost) != oracle::assignment_bruteforce(cost)) ++bad;
    }
    if (bad > 0) pass = false;
    detail += "hungarian_mismatches=" + std::to_string(bad) + " ";
  }
  // fg_ari vs pair counting, 200 random partitions of <= 64 pixels
  {
    Rng rng(402);
    int bad = 0;
    for (int rep = 0; rep < 200; ++rep) {
      int n = rng.uniform_int(4, 64);
      std::vector<int> a(static_cast<size_t>(n)), b(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) {
        a[size_t(i)] = rng.uniform_int(0, 4);
        b[size_t(i)] = rng.uniform_int(1, 5);
      }
      Segmentation ga{1, 1, n, a}, gb{1, 1, n, b};
      auto got = fg_ari(ga, gb);
      std::vector<int> afg, bfg;
      for (int i = 0; i < n; ++i)
        if (a[size_t(i)] != 0) {
          afg.push_back(a[size_t(i)]);
          bfg.push_back(b[size_t(i)]);
        }
      if (afg.empty()) {
        if (got.has_value()) ++bad;
      } else if (!got.has_value() ||
                 std::abs(got.value() - oracle::ari_pairs(afg, bfg)) > 1e-9) {
        ++bad;
      }
    }
    if (bad > 0) pass = false;
    detail += "fg_ari_mismatches=" + std::to_string(bad) + " ";
  }
  // fixture values for miou / mbo / psnr / ssim
  {
    Segmentation gt{1, 1, 8, {1, 1, 1, 1, 0, 0, 0, 0}};
    Segmentation half{1, 1, 8, {5, 5, 0, 0, 0, 0, 0, 0}};
    bool f1 = std::abs(miou(gt, gt) - 1.0) < 1e-12;
    bool f2 = std::abs(miou(gt, half) - 0.5) < 1e-12;
    Segmentation gt2{1, 1, 6, {1, 1, 0, 2, 2, 0}};
    Segmentation uni{1, 1, 6, {9, 9, 0, 9, 9, 0}};
    std::map<int, int> cats{{1, 0}, {2, 0}};
    bool f3 = std::abs(mbo(gt2, uni, MboLevel::Instance) - 0.5) < 1e-12;
    bool f4 = std::abs(mbo(gt2, uni, MboLevel::Class, &cats) - 1.0) < 1e-12;
    Segmentation gt3{1, 1, 10, {1, 1, 1, 1, 1, 0, 0, 0, 0, 0}};
    Segmentation p06{1, 1, 10, {4, 4, 4, 0, 0, 0, 0, 0, 0, 0}};
    bool f5 = std::abs(mbo(gt3, p06, MboLevel::Instance) - 0.6) < 1e-12;
    TensorD a = TensorD::full({3, 8, 8}, 0.5);
    TensorD b = a;
    for (auto& v : b.data) v += 0.1;
    TensorD c = a;
    for (auto& v : c.data) v += 1.0;
    bool f6 = std::isinf(psnr(a, a)) && std::abs(psnr(a, b) - 20.0) < 1e-9 &&
              std::abs(psnr(a, c) - 0.0) < 1e-9;
    TensorD cb({1, 16, 16});
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) cb.data[size_t(y) * 16 + x] = double((x + y) % 2);
    TensorD inv = cb;
    for (auto& v : inv.data) v = 1.0 - v;
    bool f7 = std::abs(ssim(cb, cb) - 1.0) < 1e-12 && ssim(cb, inv) < 0.1 &&
              std::abs(ssim(TensorD::full({1, 8, 8}, 0.3), TensorD::full({1, 8, 8}, 0.3)) - 1.0) <
                  1e-12;
    if (!(f1 && f2 && f3 && f4 && f5 && f6 && f7)) pass = false;
    detail += std::string("fixtures=") +
              (f1 && f2 && f3 && f4 && f5 && f6 && f7 ? "ok" : "bad");
  }
  report(4, pass, "metric oracles: " + detail);
}

// ===========================================================================

TEST_CASE("criterion05") {
  NoiseSchedule s = make_schedule(200, 1e-4, 0.04);
  Rng rng(501);
  double worst_mu = 0, worst_inv = 0;
  for (int rep = 0; rep < 100; ++rep) {
    TensorD x0 = TensorD::randn({4, 4}, rng);
    TensorD eps = TensorD::randn({4, 4}, rng);
    int t = rep % 2 == 0 ? rng.uniform_int(0, 199) : (rep / 2) % 200;
    TensorD xt = q_sample(x0, t, eps, s);
    TensorD mu_eps = posterior_mean(xt, t, eps, s);
    TensorD mu_x0 = posterior_mean_from_x0(xt, t, x0, s);
    for (int64_t i = 0; i < 16; ++i)
      worst_mu = std::max(worst_mu, std::abs(mu_eps[i] - mu_x0[i]));
    TensorD rec = invert_q_sample(xt, t, eps, s);
    for (int64_t i = 0; i < 16; ++i) worst_inv = std::max(worst_inv, std::abs(rec[i] - x0[i]));
  }
  bool pass = worst_mu < 1e-5 && worst_inv < 1e-5;
  report(5, pass, "ddpm identities: posterior-mean gap " + fmt(worst_mu) +
                      ", inversion gap " + fmt(worst_inv));
}

// ===========================================================================

TEST_CASE("criterion06") {
  Config cfg = broadcast_cfg();
  auto model = ensure_model(cfg);
  Dataset val = load_dataset(cfg.io_data_dir + "/val");
  Dataset train = load_dataset(cfg.io_data_dir + "/train");
  double baseline = dataset_variance(train);
  double mse = broadcast_val_mse(*model, val);
  EvalAggregate agg = evaluate_split(*model, val, nullptr, false);
  bool mse_ok = mse < 0.5 * baseline;
  bool ari_ok = agg.fg_ari >= 0.5;
  report(6, mse_ok && ari_ok,
         "broadcast learning: val MSE " + fmt(mse) + " vs baseline " + fmt(baseline) +
             " (need < " + fmt(0.5 * baseline) + "), FG-ARI " + fmt(agg.fg_ari) +
             " (need >= 0.5)");
}

// ===========================================================================

namespace {

// PSNR of a diffusion sample against a reference image.
double sample_psnr(const Model<float>& m, const ConditioningBundle<float>& bundle,
                   const TensorF& ref, uint64_t seed, double cfg_scale) {
  Rng rng(seed);
  TensorF img = diffusion_sample(m, bundle, rng, cfg_scale);
  double p = psnr(img, ref);
  return std::isinf(p) ? 100.0 : p;
}

}  // namespace

TEST_CASE("criterion07") {
  Config cfg_none = diffusion_cfg("none");
  Config cfg_joint = diffusion_cfg("joint");
  auto model_none = ensure_model(cfg_none);
  auto model_joint = ensure_model(cfg_joint);
  Dataset val = load_dataset(cfg_none.io_data_dir + "/val");

  // grounding: conditioned reconstructions beat unconditional samples by 3dB
  double cond_sum = 0, uncond_sum = 0;
  int n_images = 10;
  for (int i = 0; i < n_images; ++i) {
    const SceneSample& s = val.samples[size_t(i * 7)];
    TensorF ref = sample_to_x01(s);
    Rng enc_rng(0xc0ffee + uint64_t(i));
    EncodedSample<float> enc = encode_sample_value(*model_none, s, enc_rng);
    ConditioningBundle<float> bundle = bundle_from_slots(enc.slots);
    cond_sum += sample_psnr(*model_none, bundle, ref, 900 + uint64_t(i),
                            cfg_none.decoder_cfg_scale);
    ConditioningBundle<float> null_bundle;
    null_bundle.slots = model_none->null_cond.slot.value;
    null_bundle.register_token = model_none->null_cond.register_token.value;
    null_bundle.null = true;
    uncond_sum += sample_psnr(*model_none, null_bundle, ref, 900 + uint64_t(i), 1.0);
  }
  double cond_psnr = cond_sum / n_images, uncond_psnr = uncond_sum / n_images;
  bool grounding_ok = cond_psnr >= uncond_psnr + 3.0;

  // guidance must not cost more than 0.05 FG-ARI
  EvalAggregate agg_none = evaluate_split(*model_none, val, nullptr, false);
  EvalAggregate agg_joint = evaluate_split(*model_joint, val, nullptr, false);
  bool guidance_ok = agg_joint.fg_ari >= agg_none.fg_ari - 0.05;

  report(7, grounding_ok && guidance_ok,
         "diffusion learning: conditioned PSNR " + fmt(cond_psnr) + " vs unconditional " +
             fmt(uncond_psnr) + " (need +3dB); FG-ARI joint " + fmt(agg_joint.fg_ari) +
             " vs none " + fmt(agg_none.fg_ari) + " (allowed drop 0.05)");
}

// ===========================================================================

TEST_CASE("criterion08") {
  bool exact_ok = true;
  // broadcast-path editing identities: removing a slot equals renormalized
  // compositing of the remaining renders, replace-back restores the bundle
  {
    Rng rng(801);
    Tape<float> t;
    NoGradScope<float> ng(t);
    TensorF rgb = TensorF::randn({3, 3, 6, 6}, rng, 0.1);
    for (auto& v : rgb.data) v += 0.5f;
    TensorF logits = TensorF::randn({3, 1, 6, 6}, rng);
    PerSlotRenderVars<float> full{t.input(rgb), t.input(logits), 1, 3};
    auto cf = alpha_composite(t, full);
    TensorF rgb2({2, 3, 6, 6}), logits2({2, 1, 6, 6});
    std::copy_n(rgb.data.data(), 108, rgb2.data.data());
    std::copy_n(rgb.data.data() + 216, 108, rgb2.data.data() + 108);
    std::copy_n(logits.data.data(), 36, logits2.data.data());
    std::copy_n(logits.data.data() + 72, 36, logits2.data.data() + 36);
    PerSlotRenderVars<float> sub{t.input(rgb2), t.input(logits2), 1, 2};
    auto cs = alpha_composite(t, sub);
    const TensorF& mf = t.val(cf.masks);
    for (int p = 0; p < 36; ++p) {
      double z = mf.at(0, p) + mf.at(2, p);
      double expect0 = mf.at(0, p) / z, expect2 = mf.at(2, p) / z;
      if (std::abs(t.val(cs.masks).at(0, p) - expect0) > 1e-5 ||
          std::abs(t.val(cs.masks).at(1, p) - expect2) > 1e-5)
        exact_ok = false;
    }
    // bundle-level identities
    ConditioningBundle<float> b = bundle_from_slots(TensorF::randn({4, 8}, rng));
    TensorF row1({1, 8});
    for (int c = 0; c < 8; ++c) row1[c] = b.slots.at(1, c);
    auto removed = edit_bundle(b, EditOp<float>::remove(1));
    if (removed.slots.rows() != 3) exact_ok = false;
    auto restored = edit_bundle(removed, EditOp<float>::add(row1));
    for (int c = 0; c < 8; ++c)
      if (std::abs(restored.register_token[c] - b.register_token[c]) > 1e-6) exact_ok = false;
    auto replaced = edit_bundle(b, EditOp<float>::replace(2, row1));
    auto back = edit_bundle(replaced, EditOp<float>::replace(2, [&] {
                              TensorF orig({1, 8});
                              for (int c = 0; c < 8; ++c) orig[c] = b.slots.at(2, c);
                              return orig;
                            }()));
    if (back.slots.data != b.slots.data) exact_ok = false;
  }

  // diffusion-path removal: adapter attention mass attributable to the
  // removed slot, measured over its pre-edit dominant region at the
  // guidance block, must fall below 10 percent of its pre-edit value
  Config cfg = diffusion_cfg("joint");
  auto model = ensure_model(cfg);
  Dataset val = load_dataset(cfg.io_data_dir + "/val");
  int probe_t = cfg.decoder_t / 10;  // low-noise probe step
  double ratio_sum = 0;
  int measured = 0;
  for (int i = 0; i < 20; ++i) {
    const SceneSample& s = val.samples[size_t(i * 3)];
    Rng enc_rng(0xbeef + uint64_t(i));
    EncodedSample<float> enc = encode_sample_value(*model, s, enc_rng);
    ConditioningBundle<float> bundle = bundle_from_slots(enc.slots);
    int K = bundle.slots.rows();
    // choose the slot whose encoder mask best covers some ground-truth object
    Segmentation gt{1, s.H, s.W, s.mask_labels()};
    TensorF masks = encoder_masks(enc.attn_nk, model->backbone.grid_h, model->backbone.grid_w,
                                  s.H, s.W);
    auto labels = masks_argmax(masks);
    int best_j = -1;
    double best_iou = 0;
    for (int j = 0; j < K; ++j) {
      for (int obj = 1; obj <= int(s.sprites.size()); ++obj) {
        int64_t inter = 0, uni = 0;
        for (size_t p = 0; p < labels.size(); ++p) {
          bool in_pred = labels[p] == j + 1;
          bool in_gt = gt.labels[p] == obj;
          inter += in_pred && in_gt;
          uni += in_pred || in_gt;
        }
        double iou = uni > 0 ? double(inter) / double(uni) : 0.0;
        if (iou > best_iou) {
          best_iou = iou;
          best_j = j;
        }
      }
    }
    if (best_j < 0) continue;

    TensorF x01 = sample_to_x01(s);
    TensorF x0 = x01;
    for (auto& v : x0.data) v = 2 * v - 1;
    Rng noise_rng(0x11 + uint64_t(i));
    TensorF eps = TensorF::randn(x0.shape, noise_rng);
    TensorF xt = q_sample(x0, probe_t, eps, model->sched);
    auto pre = predict_noise_value(model->denoiser, xt, probe_t, bundle);
    if (pre.attn_dm.empty()) continue;
    int M = pre.attn_dm.cols();
    std::vector<int> region;
    for (int m2 = 0; m2 < M; ++m2) {
      int arg = 0;
      for (int k = 1; k < K; ++k)
        if (pre.attn_dm.at(k, m2) > pre.attn_dm.at(arg, m2)) arg = k;
      if (arg == best_j) region.push_back(m2);
    }
    if (region.empty()) continue;
    double mass_pre = 0;
    for (int m2 : region) mass_pre += pre.attn_dm.at(best_j, m2);
    mass_pre /= double(region.size());

    // sample the edited image, renoise it, and probe with the full bundle
    ConditioningBundle<float> edited = edit_bundle(bundle, EditOp<float>::remove(best_j));
    Rng samp_rng(0x5eed + uint64_t(i));
    TensorF edited_img = diffusion_sample(*model, edited, samp_rng, cfg.decoder_cfg_scale);
    TensorF ex0 = edited_img;
    for (auto& v : ex0.data) v = 2 * v - 1;
    TensorF ext = q_sample(ex0, probe_t, eps, model->sched);
    auto post = predict_noise_value(model->denoiser, ext, probe_t, bundle);
    double mass_post = 0;
    for (int m2 : region) mass_post += post.attn_dm.at(best_j, m2);
    mass_post /= double(region.size());
    ratio_sum += mass_post / std::max(1e-9, mass_pre);
    ++measured;
  }
  double mean_ratio = measured > 0 ? ratio_sum / measured : 1.0;
  bool mass_ok = measured >= 10 && mean_ratio < 0.10;
  report(8, exact_ok && mass_ok,
         "editing: exact compositing identities " + std::string(exact_ok ? "hold" : "broken") +
             "; post/pre adapter mass ratio " + fmt(mean_ratio) + " over " +
             std::to_string(measured) + " images (need < 0.10)");
}

// ===========================================================================

TEST_CASE("criterion09") {
  Config cfg = video_cfg();
  auto model = ensure_model(cfg);
  Dataset val = load_dataset(cfg.io_data_dir + "/val");
  int64_t clips = val.count();
  int64_t frames_total = 0, frames_ok = 0;
  for (int64_t i = 0; i < clips; ++i) {
    std::vector<SceneSample> frames;
    for (int f = 0; f < val.L; ++f) frames.push_back(val.frame(i, f));
    Rng rng(0xe7a1u + uint64_t(i));
    auto encs = encode_clip_value(*model, frames, rng);
    // the sprite's slot: best clip-level overlap between argmax masks and fg
    int K = encs[0].slots.rows();
    std::vector<int64_t> overlap(size_t(K), 0);
    for (int f = 0; f < val.L; ++f) {
      auto labels = predicted_labels(*model, encs[size_t(f)]);
      for (size_t p = 0; p < labels.size(); ++p)
        if (frames[size_t(f)].mask[p] != 0) overlap[size_t(labels[p] - 1)]++;
    }
    int best = 0;
    for (int k = 1; k < K; ++k)
      if (overlap[size_t(k)] > overlap[size_t(best)]) best = k;
    const SpriteSpec& sprite = val.attributes[size_t(i)][0];
    for (int f = 0; f < val.L; ++f) {
      auto cen = analytic_centroid_px(sprite, f, val.H, val.W);
      double px = (double(encs[size_t(f)].pos.at(best, 0)) + 1.0) * 0.5 * val.W - 0.5;
      double py = (double(encs[size_t(f)].pos.at(best, 1)) + 1.0) * 0.5 * val.H - 0.5;
      double err = std::sqrt((px - cen[0]) * (px - cen[0]) + (py - cen[1]) * (py - cen[1]));
      frames_total++;
      if (err <= 2.0) frames_ok++;
    }
  }
  double frac = frames_total > 0 ? double(frames_ok) / double(frames_total) : 0.0;
  report(9, frac >= 0.8,
         "temporal coherence: ISA position within 2px on " + fmt(100.0 * frac) + "% of " +
             std::to_string(frames_total) + " frames (need >= 80%)");
}

// ===========================================================================

TEST_CASE("criterion10") {
  const char* cli = std::getenv("SLOTDIFF_CLI");
  REQUIRE_MESSAGE(cli != nullptr, "SLOTDIFF_CLI must point at the CLI binary");
  std::string W = work_dir() + "/det";
  fs::remove_all(W);
  fs::create_directories(W);
  Config data_cfg = image_dataset_cfg();
  ensure_dataset(data_cfg);
  std::string common = std::string(cli) +
                       " train --set io.data_dir=" + data_cfg.io_data_dir +
                       " --set io.out_dir=" + W + "/run" +
                       " --set train.steps=60 --set train.batch=2"
                       " --set decoder.path=diffusion --set guidance.mode=joint"
                       " --set guidance.warmup_frac=0.5 --set train.threads=1"
                       " > /dev/null 2>&1";
  REQUIRE(std::system(common.c_str()) == 0);
  fs::copy_file(W + "/run/ckpt_final.sdcp", W + "/first.sdcp");
  fs::copy_file(W + "/run/loss_log.txt", W + "/first_log.txt");
  REQUIRE(std::system(common.c_str()) == 0);
  auto slurp = [](const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  };
  bool logs_equal = slurp(W + "/run/loss_log.txt") == slurp(W + "/first_log.txt");
  bool ckpt_equal = slurp(W + "/run/ckpt_final.sdcp") == slurp(W + "/first.sdcp");
  report(10, logs_equal && ckpt_equal,
         std::string("determinism: loss logs ") + (logs_equal ? "identical" : "differ") +
             ", checkpoints " + (ckpt_equal ? "identical" : "differ"));
}
