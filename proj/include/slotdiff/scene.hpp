#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "slotdiff/rng.hpp"
#include "slotdiff/tensor.hpp"

// Procedural multi-object sprite scenes with exact instance masks. All
// geometry lives on a 1/256 fixed-point grid and membership tests are pure
// integer comparisons, so rendered bytes are identical across platforms.

namespace slotdiff {

constexpr int kPoseQ = 256;  // fixed-point denominator for poses and scales

enum class SpriteKind : int { Circle = 0, Square = 1, Triangle = 2 };

struct SpriteSpec {
  SpriteKind kind = SpriteKind::Circle;
  std::array<uint8_t, 3> color{0, 0, 0};
  std::array<int, 2> pos_q{0, 0};    // center in [-1,1]^2, units of 1/256
  std::array<int, 2> scale_q{0, 0};  // half-extent, units of 1/256
  std::array<int, 2> vel_q{0, 0};    // displacement per frame, units of 1/256
  int category = 0;                  // = kind index
  int depth = 0;                     // draw order, higher draws on top
};

struct SceneSample {
  int H = 0, W = 0;
  std::vector<uint8_t> image;  // H*W*3
  std::vector<uint8_t> mask;   // H*W instance ids, 0 = background
  std::vector<SpriteSpec> sprites;
  uint64_t seed = 0;

  // [3,H,W] float image in [0,1]
  TensorF image_chw() const {
    TensorF t({3, H, W});
    for (int c = 0; c < 3; ++c)
      for (int p = 0; p < H * W; ++p) t.data[size_t(c) * H * W + p] = float(image[size_t(p) * 3 + c]) / 255.0f;
    return t;
  }
  std::vector<int> mask_labels() const { return std::vector<int>(mask.begin(), mask.end()); }
};

struct VideoSample {
  int L = 0, H = 0, W = 0;
  std::vector<uint8_t> frames;  // L*H*W*3
  std::vector<uint8_t> masks;   // L*H*W
  std::vector<SpriteSpec> sprites;
  std::vector<std::array<int, 2>> tracks;  // L*K poses (frame-major), q units
  uint64_t seed = 0;

  SceneSample frame(int t) const {
    SceneSample s;
    s.H = H;
    s.W = W;
    s.seed = seed;
    s.sprites = sprites;
    s.image.assign(frames.begin() + size_t(t) * H * W * 3, frames.begin() + size_t(t + 1) * H * W * 3);
    s.mask.assign(masks.begin() + size_t(t) * H * W, masks.begin() + size_t(t + 1) * H * W);
    return s;
  }
};

enum class BackgroundMode { Gray, Gradient };

struct SceneConfig {
  int H = 32, W = 32;
  int min_count = 1, max_count = 3;
  int L = 5;  // video length
  BackgroundMode background = BackgroundMode::Gray;
  std::array<uint8_t, 3> bg_gray{128, 128, 128};
  std::array<uint8_t, 3> bg_top{110, 110, 130};
  std::array<uint8_t, 3> bg_bottom{150, 150, 120};
  int scale_min_q = 26;   // ~0.10
  int scale_max_q = 90;   // ~0.35
  int pos_span_q = 192;   // centers in [-0.75, 0.75]
  int speed_max_q = 16;   // per-frame displacement <= 1/16
  int min_visible_pixels = 8;
  int max_layout_attempts = 64;
  std::vector<std::array<uint8_t, 3>> palette = default_palette();

  static std::vector<std::array<uint8_t, 3>> default_palette() {
    return {{{230, 25, 75}},
            {{60, 180, 75}},
            {{0, 130, 200}},
            {{255, 225, 25}},
            {{145, 30, 180}},
            {{70, 240, 240}},
            {{245, 130, 48}},
            {{240, 50, 230}}};
  }
};

namespace detail {

// Pixel-center membership. Column c (x right), row r (y down). A sprite's
// test is exact: all quantities are integers after clearing denominators.
inline bool sprite_covers(const SpriteSpec& s, int r, int c, int H, int W, int px, int py) {
  int64_t Ax = int64_t(2 * c + 1 - W) * kPoseQ - int64_t(W) * px;   // denom W*q
  int64_t Ay = int64_t(2 * r + 1 - H) * kPoseQ - int64_t(H) * py;   // denom H*q
  int64_t ex = int64_t(W) * s.scale_q[0];
  int64_t ey = int64_t(H) * s.scale_q[1];
  switch (s.kind) {
    case SpriteKind::Square:
      return std::abs(Ax) <= ex && std::abs(Ay) <= ey;
    case SpriteKind::Circle: {
      __int128 lhs = __int128(Ax) * Ax * (__int128(ey) * ey) + __int128(Ay) * Ay * (__int128(ex) * ex);
      __int128 rhs = __int128(ex) * ex * (__int128(ey) * ey);
      return lhs <= rhs;
    }
    case SpriteKind::Triangle: {
      // apex up: V0=(px, py-sy), V1=(px-sx, py+sy), V2=(px+sx, py+sy)
      int64_t vx[3] = {0, -s.scale_q[0], s.scale_q[0]};
      int64_t vy[3] = {-s.scale_q[1], s.scale_q[1], s.scale_q[1]};
      int sign = 0;
      for (int e = 0; e < 3; ++e) {
        int f = (e + 1) % 3;
        // cross((Vf-Ve), (P-Ve)) scaled by W*H*q^2 > 0 test
        int64_t dxe = vx[f] - vx[e];
        int64_t dye = vy[f] - vy[e];
        int64_t Pex = Ax - int64_t(W) * vx[e];  // (P - Ve)_x * W*q
        int64_t Pey = Ay - int64_t(H) * vy[e];
        int64_t cross = dxe * int64_t(W) * Pey - dye * int64_t(H) * Pex;
        if (cross == 0) continue;
        int cs = cross > 0 ? 1 : -1;
        if (sign == 0)
          sign = cs;
        else if (sign != cs)
          return false;
      }
      return true;
    }
  }
  return false;
}

inline std::array<uint8_t, 3> background_at(const SceneConfig& cfg, int r) {
  if (cfg.background == BackgroundMode::Gray) return cfg.bg_gray;
  std::array<uint8_t, 3> out;
  int denom = cfg.H > 1 ? cfg.H - 1 : 1;
  for (int c = 0; c < 3; ++c) {
    int top = cfg.bg_top[size_t(c)], bot = cfg.bg_bottom[size_t(c)];
    out[size_t(c)] = uint8_t(top + (bot - top) * r / denom);
  }
  return out;
}

// One bounce step on a 1-d pose; exact integer reflection at the walls.
inline void advance_axis(int& p, int& v, int half_extent) {
  int lo = -kPoseQ + half_extent, hi = kPoseQ - half_extent;
  if (lo > hi) {  // sprite wider than frame: pin to center
    p = 0;
    v = 0;
    return;
  }
  p += v;
  for (int guard = 0; guard < 8 && (p < lo || p > hi); ++guard) {
    if (p < lo) {
      p = 2 * lo - p;
      v = -v;
    } else if (p > hi) {
      p = 2 * hi - p;
      v = -v;
    }
  }
}

inline void render(const std::vector<SpriteSpec>& sprites,
                   const std::vector<std::array<int, 2>>& poses, const SceneConfig& cfg,
                   std::vector<uint8_t>& image, std::vector<uint8_t>& mask) {
  int H = cfg.H, W = cfg.W;
  image.assign(size_t(H) * W * 3, 0);
  mask.assign(size_t(H) * W, 0);
  for (int r = 0; r < H; ++r) {
    auto bg = background_at(cfg, r);
    for (int c = 0; c < W; ++c) {
      size_t p = size_t(r) * W + c;
      int top = -1;
      for (int j = 0; j < int(sprites.size()); ++j) {
        if (sprite_covers(sprites[size_t(j)], r, c, H, W, poses[size_t(j)][0], poses[size_t(j)][1]))
          if (top < 0 || sprites[size_t(j)].depth > sprites[size_t(top)].depth) top = j;
      }
      if (top >= 0) {
        mask[p] = uint8_t(top + 1);
        for (int ch = 0; ch < 3; ++ch)
          image[p * 3 + ch] = sprites[size_t(top)].color[size_t(ch)];
      } else {
        for (int ch = 0; ch < 3; ++ch) image[p * 3 + ch] = bg[size_t(ch)];
      }
    }
  }
}

inline std::vector<SpriteSpec> sample_layout(Rng& rng, const SceneConfig& cfg) {
  int count = cfg.min_count == cfg.max_count ? cfg.min_count
                                             : rng.uniform_int(cfg.min_count, cfg.max_count);
  std::vector<SpriteSpec> sprites;
  for (int j = 0; j < count; ++j) {
    SpriteSpec s;
    s.kind = SpriteKind(rng.uniform_int(0, 2));
    s.color = cfg.palette[size_t(rng.uniform_int(0, int(cfg.palette.size()) - 1))];
    s.pos_q = {rng.uniform_int(-cfg.pos_span_q, cfg.pos_span_q),
               rng.uniform_int(-cfg.pos_span_q, cfg.pos_span_q)};
    s.scale_q = {rng.uniform_int(cfg.scale_min_q, cfg.scale_max_q),
                 rng.uniform_int(cfg.scale_min_q, cfg.scale_max_q)};
    s.category = int(s.kind);
    s.depth = j;
    sprites.push_back(s);
  }
  return sprites;
}

inline bool all_visible(const std::vector<uint8_t>& mask, int count, int min_pixels) {
  std::vector<int> counts(size_t(count) + 1, 0);
  for (uint8_t m : mask)
    if (m <= count) counts[m]++;
  for (int j = 1; j <= count; ++j)
    if (counts[size_t(j)] < min_pixels) return false;
  return true;
}

}  // namespace detail

// Deterministic scene generation: bytes depend only on (seed, cfg).
inline SceneSample gen_image(uint64_t seed, const SceneConfig& cfg) {
  if (cfg.H < 16 || cfg.W < 16) throw std::invalid_argument("gen_image: H,W >= 16 required");
  if (cfg.max_count > 8) throw std::invalid_argument("gen_image: max 8 objects");
  Rng rng = Rng(seed).fork(0x5ce7e);
  SceneSample out;
  out.H = cfg.H;
  out.W = cfg.W;
  out.seed = seed;
  for (int attempt = 0;; ++attempt) {
    if (attempt >= cfg.max_layout_attempts) throw std::runtime_error("gen_image: no valid placement");
    auto sprites = detail::sample_layout(rng, cfg);
    std::vector<std::array<int, 2>> poses;
    for (auto& s : sprites) poses.push_back(s.pos_q);
    detail::render(sprites, poses, cfg, out.image, out.mask);
    if (detail::all_visible(out.mask, int(sprites.size()), cfg.min_visible_pixels)) {
      out.sprites = std::move(sprites);
      return out;
    }
  }
}

inline VideoSample gen_video(uint64_t seed, const SceneConfig& cfg) {
  if (cfg.L < 1) throw std::invalid_argument("gen_video: L >= 1 required");
  if (cfg.H < 16 || cfg.W < 16) throw std::invalid_argument("gen_video: H,W >= 16 required");
  if (cfg.max_count > 8) throw std::invalid_argument("gen_video: max 8 objects");
  Rng rng = Rng(seed).fork(0x5ce7e);
  VideoSample out;
  out.L = cfg.L;
  out.H = cfg.H;
  out.W = cfg.W;
  out.seed = seed;
  std::vector<SpriteSpec> sprites;
  for (int attempt = 0;; ++attempt) {
    if (attempt >= cfg.max_layout_attempts) throw std::runtime_error("gen_video: no valid placement");
    sprites = detail::sample_layout(rng, cfg);
    std::vector<std::array<int, 2>> poses;
    for (auto& s : sprites) poses.push_back(s.pos_q);
    std::vector<uint8_t> image, mask;
    detail::render(sprites, poses, cfg, image, mask);
    if (detail::all_visible(mask, int(sprites.size()), cfg.min_visible_pixels)) break;
  }
  for (auto& s : sprites)
    s.vel_q = {rng.uniform_int(-cfg.speed_max_q, cfg.speed_max_q),
               rng.uniform_int(-cfg.speed_max_q, cfg.speed_max_q)};

  int K = int(sprites.size());
  out.sprites = sprites;
  out.frames.reserve(size_t(cfg.L) * cfg.H * cfg.W * 3);
  out.masks.reserve(size_t(cfg.L) * cfg.H * cfg.W);
  std::vector<std::array<int, 2>> poses;
  std::vector<std::array<int, 2>> vels;
  for (auto& s : sprites) {
    poses.push_back(s.pos_q);
    vels.push_back(s.vel_q);
  }
  for (int t = 0; t < cfg.L; ++t) {
    if (t > 0) {
      for (int j = 0; j < K; ++j) {
        detail::advance_axis(poses[size_t(j)][0], vels[size_t(j)][0], sprites[size_t(j)].scale_q[0]);
        detail::advance_axis(poses[size_t(j)][1], vels[size_t(j)][1], sprites[size_t(j)].scale_q[1]);
      }
    }
    std::vector<uint8_t> image, mask;
    detail::render(sprites, poses, cfg, image, mask);
    out.frames.insert(out.frames.end(), image.begin(), image.end());
    out.masks.insert(out.masks.end(), mask.begin(), mask.end());
    for (int j = 0; j < K; ++j) out.tracks.push_back(poses[size_t(j)]);
  }
  return out;
}

// Renders an explicit sprite list (optionally at overridden poses).
inline SceneSample render_scene(const std::vector<SpriteSpec>& sprites, const SceneConfig& cfg,
                                std::vector<std::array<int, 2>> poses = {}) {
  if (poses.empty())
    for (auto& s : sprites) poses.push_back(s.pos_q);
  SceneSample out;
  out.H = cfg.H;
  out.W = cfg.W;
  out.sprites = sprites;
  detail::render(sprites, poses, cfg, out.image, out.mask);
  return out;
}

// Analytic pose of sprite j at frame t (bounce rule applied), in q units.
inline std::array<int, 2> analytic_pose(const SpriteSpec& s, int t) {
  std::array<int, 2> p = s.pos_q;
  std::array<int, 2> v = s.vel_q;
  for (int step = 0; step < t; ++step) {
    detail::advance_axis(p[0], v[0], s.scale_q[0]);
    detail::advance_axis(p[1], v[1], s.scale_q[1]);
  }
  return p;
}

// Centroid of one instance id in a mask, in pixel coordinates.
inline bool mask_centroid(const std::vector<uint8_t>& mask, int H, int W, int id, double& cy,
                          double& cx) {
  double sy = 0, sx = 0;
  int64_t n = 0;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c)
      if (mask[size_t(r) * W + c] == id) {
        sy += r;
        sx += c;
        ++n;
      }
  if (n == 0) return false;
  cy = sy / double(n);
  cx = sx / double(n);
  return true;
}

// q-units -> pixel coordinate of a pose (x maps to column, y to row).
inline double pose_to_pixel(int pose_q, int extent) {
  double norm = double(pose_q) / kPoseQ;            // [-1, 1]
  return (norm + 1.0) * 0.5 * extent - 0.5;         // pixel-center convention
}

// Continuous area centroid of sprite j at frame t, in pixel coordinates
// (cx, cy). The triangle's centroid sits a third of its height below the
// pose center; circles and squares are centered.
inline std::array<double, 2> analytic_centroid_px(const SpriteSpec& s, int t, int H, int W) {
  auto p = analytic_pose(s, t);
  double cx = pose_to_pixel(p[0], W);
  double cy = pose_to_pixel(p[1], H);
  if (s.kind == SpriteKind::Triangle) cy += double(s.scale_q[1]) / 3.0 / kPoseQ * 0.5 * H;
  return {cx, cy};
}

}  // namespace slotdiff
