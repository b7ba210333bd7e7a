#pragma once

#include <limits>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "slotdiff/tensor.hpp"

// Segmentation and reconstruction metrics: foreground-restricted adjusted
// Rand index, optimal mask matching, best-overlap scores, PSNR and SSIM.

namespace slotdiff {

struct Segmentation {
  int L = 1, H = 0, W = 0;
  std::vector<int> labels;  // L*H*W, ground truth uses 0 for background

  int64_t numel() const { return int64_t(L) * H * W; }
  bool same_shape(const Segmentation& o) const { return L == o.L && H == o.H && W == o.W; }
};

// ---------------------------------------------------------------------------
// Hungarian assignment
// ---------------------------------------------------------------------------

namespace detail {

// Potentials-based optimal assignment on a square matrix; returns row->col.
inline std::vector<int> hungarian_square(const std::vector<std::vector<double>>& a) {
  int n = int(a.size());
  const double INF = std::numeric_limits<double>::infinity();
  std::vector<double> u(size_t(n) + 1, 0.0), v(size_t(n) + 1, 0.0);
  std::vector<int> p(size_t(n) + 1, 0), way(size_t(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(size_t(n) + 1, INF);
    std::vector<char> used(size_t(n) + 1, 0);
    do {
      used[size_t(j0)] = 1;
      int i0 = p[size_t(j0)], j1 = -1;
      double delta = INF;
      for (int j = 1; j <= n; ++j) {
        if (used[size_t(j)]) continue;
        double cur = a[size_t(i0 - 1)][size_t(j - 1)] - u[size_t(i0)] - v[size_t(j)];
        if (cur < minv[size_t(j)]) {
          minv[size_t(j)] = cur;
          way[size_t(j)] = j0;
        }
        if (minv[size_t(j)] < delta) {
          delta = minv[size_t(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[size_t(j)]) {
          u[size_t(p[size_t(j)])] += delta;
          v[size_t(j)] -= delta;
        } else {
          minv[size_t(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[size_t(j0)] != 0);
    do {
      int j1 = way[size_t(j0)];
      p[size_t(j0)] = p[size_t(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> ans(size_t(n), -1);
  for (int j = 1; j <= n; ++j)
    if (p[size_t(j)] > 0) ans[size_t(p[size_t(j)] - 1)] = j - 1;
  return ans;
}

// Optimal value of matching min(n,m) pairs between the given row/col subsets
// (pads to square with zero-cost dummies).
inline double assignment_value(const std::vector<std::vector<double>>& cost,
                               const std::vector<int>& rows, const std::vector<int>& cols) {
  int n = int(rows.size()), m = int(cols.size());
  if (n == 0 || m == 0) return 0.0;
  int N = std::max(n, m);
  std::vector<std::vector<double>> a(size_t(N), std::vector<double>(size_t(N), 0.0));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) a[size_t(i)][size_t(j)] = cost[size_t(rows[size_t(i)])][size_t(cols[size_t(j)])];
  auto asg = hungarian_square(a);
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    if (asg[size_t(i)] >= 0 && asg[size_t(i)] < m) total += a[size_t(i)][size_t(asg[size_t(i)])];
  return total;
}

}  // namespace detail

// Minimum-cost one-to-one assignment of min(n,m) pairs. Returns row->col,
// -1 for unassigned rows. Among optimal solutions the lexicographically
// smallest assignment vector is returned (unassigned ranks last).
inline std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
  int n = int(cost.size());
  int m = n > 0 ? int(cost[0].size()) : 0;
  std::vector<int> result(size_t(n), -1);
  if (n == 0 || m == 0) return result;
  for (const auto& row : cost)
    for (double c : row)
      if (!std::isfinite(c)) throw std::invalid_argument("hungarian: non-finite cost");

  std::vector<int> all_rows, all_cols;
  for (int i = 0; i < n; ++i) all_rows.push_back(i);
  for (int j = 0; j < m; ++j) all_cols.push_back(j);
  double best = detail::assignment_value(cost, all_rows, all_cols);
  const double tol = 1e-9;

  // Fix rows greedily in index order, smallest feasible column first; a
  // choice is feasible when the reduced problem still reaches the optimum.
  std::vector<int> free_cols = all_cols;
  std::vector<int> rest_rows = all_rows;
  double fixed_cost = 0.0;
  int assigned = 0, needed = std::min(n, m);
  for (int i = 0; i < n; ++i) {
    rest_rows.erase(rest_rows.begin());
    bool placed = false;
    for (size_t cidx = 0; cidx < free_cols.size() && !placed; ++cidx) {
      if (assigned >= needed) break;
      int c = free_cols[cidx];
      std::vector<int> cols2 = free_cols;
      cols2.erase(cols2.begin() + long(cidx));
      double val = fixed_cost + cost[size_t(i)][size_t(c)] +
                   detail::assignment_value(cost, rest_rows, cols2);
      if (val <= best + tol) {
        result[size_t(i)] = c;
        fixed_cost += cost[size_t(i)][size_t(c)];
        free_cols = cols2;
        ++assigned;
        placed = true;
      }
    }
    if (!placed) {
      // leaving row i unassigned must also preserve optimality
      double val = fixed_cost + detail::assignment_value(cost, rest_rows, free_cols);
      if (val > best + tol) throw std::logic_error("hungarian: refinement failed");
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// FG-ARI
// ---------------------------------------------------------------------------

// Adjusted Rand Index restricted to ground-truth foreground pixels.
// Undefined (no foreground) -> nullopt, excluded from averages upstream.
inline std::optional<double> fg_ari(const Segmentation& gt, const Segmentation& pred) {
  if (!gt.same_shape(pred)) throw std::invalid_argument("fg_ari: shape mismatch");
  std::map<std::pair<int, int>, int64_t> cont;
  std::map<int, int64_t> asz, bsz;
  int64_t n = 0;
  for (int64_t i = 0; i < gt.numel(); ++i) {
    int g = gt.labels[size_t(i)];
    if (g == 0) continue;
    int p = pred.labels[size_t(i)];
    cont[{g, p}]++;
    asz[g]++;
    bsz[p]++;
    ++n;
  }
  if (n == 0) return std::nullopt;
  auto comb2 = [](int64_t k) { return double(k) * double(k - 1) / 2.0; };
  double sum_ij = 0, sum_a = 0, sum_b = 0;
  for (auto& [k, v] : cont) sum_ij += comb2(v);
  for (auto& [k, v] : asz) sum_a += comb2(v);
  for (auto& [k, v] : bsz) sum_b += comb2(v);
  double total = comb2(n);
  if (total == 0) return 1.0;  // single foreground pixel
  double expected = sum_a * sum_b / total;
  double maxidx = 0.5 * (sum_a + sum_b);
  if (std::abs(maxidx - expected) < 1e-12) return 1.0;  // identical degenerate partitions
  return (sum_ij - expected) / (maxidx - expected);
}

// ---------------------------------------------------------------------------
// matched / best-overlap IoU metrics
// ---------------------------------------------------------------------------

namespace detail {

struct OverlapTable {
  std::vector<int> gt_ids, pred_ids;            // nonzero gt ids; all pred ids
  std::vector<std::vector<int64_t>> inter;      // gt x pred intersections
  std::vector<int64_t> gt_area, pred_area;
  std::vector<int64_t> pred_bg_overlap;         // pred overlap with gt==0
};

inline OverlapTable overlaps(const Segmentation& gt, const Segmentation& pred) {
  if (!gt.same_shape(pred)) throw std::invalid_argument("metrics: shape mismatch");
  OverlapTable t;
  std::map<int, int> gmap, pmap;
  for (int64_t i = 0; i < gt.numel(); ++i) {
    int g = gt.labels[size_t(i)];
    if (g != 0 && !gmap.count(g)) {
      gmap[g] = int(t.gt_ids.size());
      t.gt_ids.push_back(g);
    }
    int p = pred.labels[size_t(i)];
    if (!pmap.count(p)) {
      pmap[p] = int(t.pred_ids.size());
      t.pred_ids.push_back(p);
    }
  }
  t.inter.assign(t.gt_ids.size(), std::vector<int64_t>(t.pred_ids.size(), 0));
  t.gt_area.assign(t.gt_ids.size(), 0);
  t.pred_area.assign(t.pred_ids.size(), 0);
  t.pred_bg_overlap.assign(t.pred_ids.size(), 0);
  for (int64_t i = 0; i < gt.numel(); ++i) {
    int g = gt.labels[size_t(i)];
    int pj = pmap[pred.labels[size_t(i)]];
    t.pred_area[size_t(pj)]++;
    if (g == 0) {
      t.pred_bg_overlap[size_t(pj)]++;
    } else {
      int gi = gmap[g];
      t.inter[size_t(gi)][size_t(pj)]++;
      t.gt_area[size_t(gi)]++;
    }
  }
  return t;
}

inline double iou_of(const OverlapTable& t, size_t gi, size_t pj) {
  double inter = double(t.inter[gi][pj]);
  double uni = double(t.gt_area[gi]) + double(t.pred_area[pj]) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

}  // namespace detail

struct MiouOptions {
  bool exclude_pred_background = true;  // drop the pred segment that best covers gt background
};

// Hungarian-matched mean IoU over ground-truth foreground objects; unmatched
// objects score 0. A clip (L>1) is matched once on frame-aggregated overlaps.
inline double miou(const Segmentation& gt, const Segmentation& pred, MiouOptions opt = {}) {
  auto t = detail::overlaps(gt, pred);
  if (t.gt_ids.empty()) return 0.0;
  std::vector<size_t> cand;
  size_t bg = size_t(-1);
  if (opt.exclude_pred_background && !t.pred_ids.empty()) {
    int64_t best = -1;
    for (size_t pj = 0; pj < t.pred_ids.size(); ++pj)
      if (t.pred_bg_overlap[pj] > best) {
        best = t.pred_bg_overlap[pj];
        bg = pj;
      }
  }
  for (size_t pj = 0; pj < t.pred_ids.size(); ++pj)
    if (pj != bg) cand.push_back(pj);
  if (cand.empty()) return 0.0;
  std::vector<std::vector<double>> cost(t.gt_ids.size(), std::vector<double>(cand.size(), 0.0));
  for (size_t gi = 0; gi < t.gt_ids.size(); ++gi)
    for (size_t cj = 0; cj < cand.size(); ++cj) cost[gi][cj] = -detail::iou_of(t, gi, cand[cj]);
  auto asg = hungarian(cost);
  double acc = 0.0;
  for (size_t gi = 0; gi < t.gt_ids.size(); ++gi)
    if (asg[gi] >= 0) acc += detail::iou_of(t, gi, cand[size_t(asg[gi])]);
  return acc / double(t.gt_ids.size());
}

enum class MboLevel { Instance, Class };

// Mean best overlap: per gt mask (or per-category union), the best IoU over
// every predicted mask; averaged. `categories` maps gt instance id ->
// category id and is required at class level.
inline double mbo(const Segmentation& gt, const Segmentation& pred, MboLevel level,
                  const std::map<int, int>* categories = nullptr) {
  if (level == MboLevel::Class) {
    if (categories == nullptr) throw std::invalid_argument("mbo: class level needs categories");
    Segmentation gtc = gt;
    for (auto& l : gtc.labels)
      if (l != 0) {
        auto it = categories->find(l);
        if (it == categories->end()) throw std::invalid_argument("mbo: id missing category");
        l = it->second + 1000;  // offset keeps category ids clear of 0
      }
    return mbo(gtc, pred, MboLevel::Instance, nullptr);
  }
  auto t = detail::overlaps(gt, pred);
  if (t.gt_ids.empty()) return 0.0;
  double acc = 0.0;
  for (size_t gi = 0; gi < t.gt_ids.size(); ++gi) {
    double best = 0.0;
    for (size_t pj = 0; pj < t.pred_ids.size(); ++pj) best = std::max(best, detail::iou_of(t, gi, pj));
    acc += best;
  }
  return acc / double(t.gt_ids.size());
}

// ---------------------------------------------------------------------------
// reconstruction quality
// ---------------------------------------------------------------------------

// 10*log10(max^2 / MSE); identical images -> +infinity sentinel.
template <typename S>
double psnr(const Tensor<S>& a, const Tensor<S>& b, double max_val = 1.0) {
  if (!a.same_shape(b)) throw std::invalid_argument("psnr: shape mismatch");
  double mse = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = double(a[i]) - double(b[i]);
    mse += d * d;
  }
  mse /= double(a.numel());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_val * max_val / mse);
}

// SSIM with an 8x8 uniform sliding window; inputs are [3,H,W] or [H,W],
// color collapsed to the channel mean.
template <typename S>
double ssim(const Tensor<S>& a, const Tensor<S>& b, double max_val = 1.0) {
  if (!a.same_shape(b)) throw std::invalid_argument("ssim: shape mismatch");
  int H, W;
  std::vector<double> ga, gb;
  if (a.rank() == 3) {
    int C = a.shape[0];
    H = a.shape[1];
    W = a.shape[2];
    ga.assign(size_t(H) * W, 0.0);
    gb.assign(size_t(H) * W, 0.0);
    for (int c = 0; c < C; ++c)
      for (int64_t p = 0; p < int64_t(H) * W; ++p) {
        ga[size_t(p)] += double(a[int64_t(c) * H * W + p]) / C;
        gb[size_t(p)] += double(b[int64_t(c) * H * W + p]) / C;
      }
  } else if (a.rank() == 2) {
    H = a.shape[0];
    W = a.shape[1];
    ga.assign(a.data.begin(), a.data.end());
    gb.assign(b.data.begin(), b.data.end());
  } else {
    throw std::invalid_argument("ssim: rank-2 or rank-3 required");
  }
  const int win = 8;
  if (H < win || W < win) throw std::invalid_argument("ssim: image smaller than window");
  const double c1 = (0.01 * max_val) * (0.01 * max_val);
  const double c2 = (0.03 * max_val) * (0.03 * max_val);
  double acc = 0.0;
  int64_t count = 0;
  for (int y = 0; y + win <= H; ++y) {
    for (int x = 0; x + win <= W; ++x) {
      double ma = 0, mb = 0;
      for (int dy = 0; dy < win; ++dy)
        for (int dx = 0; dx < win; ++dx) {
          ma += ga[size_t(y + dy) * W + (x + dx)];
          mb += gb[size_t(y + dy) * W + (x + dx)];
        }
      ma /= win * win;
      mb /= win * win;
      double va = 0, vb = 0, cov = 0;
      for (int dy = 0; dy < win; ++dy)
        for (int dx = 0; dx < win; ++dx) {
          double da = ga[size_t(y + dy) * W + (x + dx)] - ma;
          double db = gb[size_t(y + dy) * W + (x + dx)] - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      va /= win * win;
      vb /= win * win;
      cov /= win * win;
      acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return acc / double(count);
}

}  // namespace slotdiff
