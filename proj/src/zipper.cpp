#include "mtz/zipper.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <tuple>

#include "mtz/data.hpp"

namespace mtz::zipper {

MergePlan::LayerTarget MergePlan::target_for(int layer) const {
  if (layers.empty()) return {};
  return layers.at(layer);
}

void MergePlan::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0))
    throw Error("MergePlan: alpha must be in (0, 1)");
  for (const auto& t : layers) {
    if (t.share_count && t.threshold)
      throw Error("MergePlan: layer target sets both count and threshold");
    if (t.share_count && *t.share_count < 0)
      throw Error("MergePlan: negative share count");
    if (t.threshold && *t.threshold < 0)
      throw Error("MergePlan: negative threshold");
  }
  if (calib_samples <= 0) throw Error("MergePlan: calib_samples must be > 0");
  retrain.validate();
}

// ---------------------------------------------------------------------------
// Merge math
// ---------------------------------------------------------------------------

namespace {

void check_pair_dims(const Mat& wa, const Mat& wb, const HessianEstimate& ha,
                     const HessianEstimate& hb) {
  if (ha.dim() != hb.dim())
    throw DimensionError("merge: Hessian dimensions differ");
  if (wa.rows() != ha.dim() || wb.rows() != hb.dim())
    throw DimensionError("merge: weight vector length != Hessian dim");
}

linalg::SpdMatrix weighted_sum(const HessianEstimate& ha,
                               const HessianEstimate& hb) {
  linalg::SpdMatrix s = ha.weighted();
  s.add(hb.weighted());
  return s;
}

}  // namespace

double functional_difference(const Vec& wa, const Vec& wb,
                             const HessianEstimate& ha,
                             const HessianEstimate& hb) {
  check_pair_dims(wa, wb, ha, hb);
  const linalg::SpdMatrix s = weighted_sum(ha, hb);
  const Mat h = ha.weighted().matrix();
  const Vec delta = wa - wb;
  const Vec hd = h * delta;
  const Vec t = s.solve(hd);
  return std::max(0.0, 0.5 * (delta.dot(hd) - hd.dot(t)));
}

OptimalUpdate optimal_updates(const Vec& wa, const Vec& wb,
                              const HessianEstimate& ha,
                              const HessianEstimate& hb) {
  check_pair_dims(wa, wb, ha, hb);
  const linalg::SpdMatrix s = weighted_sum(ha, hb);
  const Mat hma = ha.weighted().matrix();
  const Mat hmb = hb.weighted().matrix();
  OptimalUpdate up;
  // Update form of Eq. 12: exact (merged == wa) when the units agree, even
  // along damped null directions of the joint curvature.
  up.merged = wa - s.solve(hmb * (wa - wb));
  up.delta_a = up.merged - wa;
  up.delta_b = up.merged - wb;
  const Vec delta = wa - wb;
  const Vec hd = hma * delta;
  const Vec t = s.solve(hd);
  up.cost = std::max(0.0, 0.5 * (delta.dot(hd) - hd.dot(t)));
  return up;
}

Mat score_matrix(const Mat& wa, const Mat& wb, const HessianEstimate& ha,
                 const HessianEstimate& hb) {
  check_pair_dims(wa, wb, ha, hb);
  const linalg::SpdMatrix s = weighted_sum(ha, hb);
  const Mat hma = ha.weighted().matrix();
  const Mat hmb = hb.weighted().matrix();
  // M = (Ha^-1 + Hb^-1)^-1 = Ha - Ha S^-1 Ha = Hb - Hb S^-1 Hb, so every
  // pairwise quadratic form comes out of three matrix products.
  const Mat ua = hma * wa;
  const Mat ma = ua - hma * s.solve(ua);  // M * wa
  const Mat ub = hmb * wb;
  const Mat mb = ub - hmb * s.solve(ub);  // M * wb
  const Vec qa = (wa.array() * ma.array()).colwise().sum().matrix().transpose();
  const Vec qb = (wb.array() * mb.array()).colwise().sum().matrix().transpose();
  const Mat cross = wa.transpose() * mb;
  Mat out(wa.cols(), wb.cols());
  for (int i = 0; i < out.rows(); ++i)
    for (int j = 0; j < out.cols(); ++j)
      out(i, j) = std::max(0.0, 0.5 * (qa[i] + qb[j]) - cross(i, j));
  return out;
}

// ---------------------------------------------------------------------------
// Pair selection
// ---------------------------------------------------------------------------

namespace {

// O(n^3) min-cost assignment (Jonker-Volgenant style with potentials) on a
// square cost matrix. Returns the column assigned to each row.
std::vector<int> min_cost_assignment(const Mat& cost) {
  const int n = static_cast<int>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = 0;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace

std::vector<std::pair<int, int>> select_pairs(
    const Mat& scores, std::optional<int> count,
    std::optional<double> threshold, MergePlan::Matching matching) {
  const int na = static_cast<int>(scores.rows());
  const int nb = static_cast<int>(scores.cols());
  std::vector<std::tuple<double, int, int>> cand;
  if (matching == MergePlan::Matching::kGreedy) {
    cand.reserve(static_cast<size_t>(na) * nb);
    for (int i = 0; i < na; ++i)
      for (int j = 0; j < nb; ++j) cand.emplace_back(scores(i, j), i, j);
  } else {
    // Exhaustive: global min-cost assignment, padded square with a constant
    // cost so dummy matches never change the real optimum.
    const int n = std::max(na, nb);
    if (n == 0) return {};
    const double pad = (na && nb ? scores.maxCoeff() : 0.0) + 1.0;
    Mat cost = Mat::Constant(n, n, pad);
    cost.topLeftCorner(na, nb) = scores;
    const auto match = min_cost_assignment(cost);
    for (int i = 0; i < na; ++i)
      if (match[i] >= 0 && match[i] < nb)
        cand.emplace_back(scores(i, match[i]), i, match[i]);
  }
  std::sort(cand.begin(), cand.end());
  std::vector<char> used_a(na, 0), used_b(nb, 0);
  std::vector<std::pair<int, int>> out;
  const int limit = count ? *count : std::min(na, nb);
  for (const auto& [d, i, j] : cand) {
    if (static_cast<int>(out.size()) >= limit) break;
    if (threshold && d >= *threshold) break;
    if (used_a[i] || used_b[j]) continue;
    used_a[i] = used_b[j] = 1;
    out.emplace_back(i, j);
  }
  return out;
}

SparseMerge merge_sparse(const Vec& wa, const Vec& wb, const Vec& mask_a,
                         const Vec& mask_b, const HessianEstimate& ha,
                         const HessianEstimate& hb) {
  if (mask_a.size() != wa.size() || mask_b.size() != wb.size())
    throw DimensionError("merge_sparse: mask length mismatch");
  const int ca = static_cast<int>(mask_a.sum());
  const int cb = static_cast<int>(mask_b.sum());
  SparseMerge out;
  if (ca > cb)
    out.mask = mask_a;
  else if (cb > ca)
    out.mask = mask_b;
  else
    out.mask = mask_a.cwiseMax(mask_b);
  out.merged = optimal_updates(wa, wb, ha, hb).merged.cwiseProduct(out.mask);
  return out;
}

// ---------------------------------------------------------------------------
// Layer zipping
// ---------------------------------------------------------------------------

namespace {

std::vector<int> shared_input_units(const SharedLayer& sl, TaskSet full) {
  std::vector<int> out;
  for (int v = 0; v < sl.n_in_units(); ++v)
    if ((sl.in_units[v] & full) == full) out.push_back(v);
  return out;
}

struct ZipLayerOut {
  std::vector<linalg::Permutation> view_perms;  // new view pos -> old view pos
  std::vector<int> old2new;                     // old joint id -> new joint id
};

ZipLayerOut zip_layer_impl(ZippedModel& zm, int l, TaskSet left_set,
                           int new_task,
                           const std::vector<std::pair<int, int>>& pairs,
                           const Mat& merged) {
  SharedLayer& sl = zm.hidden.at(l);
  const TaskSet full = left_set | (1u << new_task);
  const int m = sl.in_mult;
  const auto shared_in = shared_input_units(sl, full);
  const int dim = static_cast<int>(shared_in.size()) * m + 1;
  if (merged.rows() != dim ||
      merged.cols() != static_cast<int>(pairs.size()))
    throw DimensionError("zip_layer: merged column shape mismatch");

  const int n_old = sl.n_units();
  std::vector<int> partner(n_old, -1);   // left id -> right id
  std::vector<int> mcol(n_old, -1);      // left id -> merged column
  std::vector<char> drop(n_old, 0);
  for (size_t k = 0; k < pairs.size(); ++k) {
    const auto [a, b] = pairs[k];
    if (a < 0 || a >= n_old || b < 0 || b >= n_old)
      throw Error("zip_layer: pair index out of range");
    if (sl.units[a] != left_set || sl.units[b] != (1u << new_task))
      throw Error("zip_layer: pair units have wrong task sets");
    if (mcol[a] >= 0 || drop[b]) throw Error("zip_layer: duplicate pair unit");
    partner[a] = b;
    mcol[a] = static_cast<int>(k);
    drop[b] = 1;
  }

  std::vector<int> old2new(n_old, -1);
  std::vector<int> keep;  // old ids surviving, in old order
  for (int u = 0; u < n_old; ++u) {
    if (drop[u]) continue;
    old2new[u] = static_cast<int>(keep.size());
    keep.push_back(u);
  }
  for (const auto& [a, b] : pairs) old2new[b] = old2new[a];

  if (!pairs.empty()) {
    const int n_new = static_cast<int>(keep.size());
    Mat w2 = Mat::Zero(sl.weights.rows(), n_new);
    Vec b2 = Vec::Zero(n_new);
    std::optional<Mat> mk2;
    if (sl.mask) mk2 = Mat::Zero(sl.weights.rows(), n_new);
    std::vector<TaskSet> units2(n_new);
    for (int c = 0; c < n_new; ++c) {
      const int u = keep[c];
      w2.col(c) = sl.weights.col(u);
      b2[c] = sl.bias[u];
      if (mk2) mk2->col(c) = sl.mask->col(u);
      units2[c] = sl.units[u];
      if (mcol[u] < 0) continue;

      // Merged unit: left cross weights stay, right cross weights move in,
      // shared rows and bias take the merged vector.
      const int r = partner[u];
      units2[c] = full;
      for (int v = 0; v < sl.n_in_units(); ++v) {
        if (!has_task(sl.in_units[v], new_task)) continue;
        if (sl.in_units[v] & left_set) continue;
        w2.block(static_cast<int64_t>(v) * m, c, m, 1) =
            sl.weights.block(static_cast<int64_t>(v) * m, r, m, 1);
        if (mk2)
          mk2->block(static_cast<int64_t>(v) * m, c, m, 1) =
              sl.mask->block(static_cast<int64_t>(v) * m, r, m, 1);
      }
      for (size_t vi = 0; vi < shared_in.size(); ++vi) {
        const int64_t row = static_cast<int64_t>(shared_in[vi]) * m;
        w2.block(row, c, m, 1) =
            merged.block(static_cast<int64_t>(vi) * m, mcol[u], m, 1);
      }
      b2[c] = merged(dim - 1, mcol[u]);
      if (mk2) {
        // Sparse rule on the shared rows: keep the mask with more ones,
        // elementwise OR on ties; merged weights vanish off the mask.
        double ones_a = 0, ones_b = 0;
        for (int v : shared_in)
          for (int k = 0; k < m; ++k) {
            ones_a += (*sl.mask)(static_cast<int64_t>(v) * m + k, u);
            ones_b += (*sl.mask)(static_cast<int64_t>(v) * m + k, r);
          }
        for (int v : shared_in)
          for (int k = 0; k < m; ++k) {
            const int64_t row = static_cast<int64_t>(v) * m + k;
            const double ma = (*sl.mask)(row, u), mb = (*sl.mask)(row, r);
            const double mm = ones_a > ones_b   ? ma
                              : ones_b > ones_a ? mb
                                                : std::max(ma, mb);
            (*mk2)(row, c) = mm;
            if (mm == 0.0) w2(row, c) = 0.0;
          }
      }
    }
    sl.weights = std::move(w2);
    sl.bias = std::move(b2);
    sl.mask = std::move(mk2);
    sl.units = std::move(units2);
  }

  // Per-task view permutations. Only the incoming task's view moves: left
  // tasks keep their units at unchanged relative positions.
  ZipLayerOut out;
  // The new task's pre-zip view: dropped ids were (1 << new_task); kept ids
  // kept their old set except merged ones, whose old set was left_set.
  std::vector<int> old_view;
  for (int u = 0; u < n_old; ++u) {
    TaskSet old_set;
    if (drop[u])
      old_set = 1u << new_task;
    else if (mcol[u] >= 0)
      old_set = left_set;
    else
      old_set = sl.units[old2new[u]];
    if (has_task(old_set, new_task)) old_view.push_back(u);
  }
  std::vector<int> old_pos(n_old, -1);
  for (size_t p = 0; p < old_view.size(); ++p) old_pos[old_view[p]] = static_cast<int>(p);

  std::vector<int> perm_new;  // new view pos -> old view pos
  for (int c = 0; c < sl.n_units(); ++c) {
    if (!has_task(sl.units[c], new_task)) continue;
    const int u = keep[c];
    const int ref = (mcol[u] >= 0) ? partner[u] : u;
    perm_new.push_back(old_pos[ref]);
  }
  for (int t = 0; t < zm.num_tasks(); ++t) {
    if (t == new_task) {
      out.view_perms.emplace_back(perm_new);
    } else {
      out.view_perms.push_back(linalg::Permutation::identity(
          static_cast<int>(sl.task_units(t).size())));
    }
  }
  const linalg::Permutation& vperm = out.view_perms[new_task];

  if (!pairs.empty()) {
    // Origins and shortcut maps of the incoming task follow its view.
    {
      std::vector<int> org(vperm.size());
      for (int p = 0; p < vperm.size(); ++p)
        org[p] = sl.origin[new_task][vperm[p]];
      sl.origin[new_task] = std::move(org);
    }
    if (sl.kind == LayerKind::kResidualExit) {
      std::vector<int> sm(vperm.size());
      for (int p = 0; p < vperm.size(); ++p)
        sm[p] = sl.shortcut_map[new_task][vperm[p]];
      sl.shortcut_map[new_task] = std::move(sm);
    }

    // Next hidden layer: re-gather its input units and weight rows. A merged
    // input unit feeds the incoming task's columns with the old right-unit
    // rows and every other column with the old left-unit rows.
    if (l + 1 < static_cast<int>(zm.hidden.size())) {
      SharedLayer& nx = zm.hidden[l + 1];
      const int nm = nx.in_mult;
      Mat w2 = Mat::Zero(static_cast<int64_t>(sl.n_units()) * nm, nx.n_units());
      std::optional<Mat> mk2;
      if (nx.mask) mk2 = Mat::Zero(w2.rows(), w2.cols());
      for (int c = 0; c < sl.n_units(); ++c) {
        const int u = keep[c];
        const int right_src = (mcol[u] >= 0) ? partner[u] : u;
        for (int q = 0; q < nx.n_units(); ++q) {
          const int src = has_task(nx.units[q], new_task) ? right_src : u;
          w2.block(static_cast<int64_t>(c) * nm, q, nm, 1) =
              nx.weights.block(static_cast<int64_t>(src) * nm, q, nm, 1);
          if (mk2)
            mk2->block(static_cast<int64_t>(c) * nm, q, nm, 1) =
                nx.mask->block(static_cast<int64_t>(src) * nm, q, nm, 1);
        }
      }
      nx.weights = std::move(w2);
      nx.mask = std::move(mk2);
      nx.in_units.assign(sl.units.begin(), sl.units.end());
    } else {
      // Last hidden layer: permute the incoming task's head rows.
      const int hm =
          sl.kind == LayerKind::kConv ? sl.conv->positions() : 1;
      Layer& head = zm.heads[new_task];
      head.weights = vperm.expand_blocks(hm).apply_rows(head.weights);
      if (head.mask) head.mask = vperm.expand_blocks(hm).apply_rows(*head.mask);
    }

    // If layer l feeds a residual entry, the following exit's shortcut map
    // indexes block-input view positions of layer l and must follow the
    // incoming task's permutation.
    if (l + 1 < static_cast<int>(zm.hidden.size()) &&
        zm.hidden[l + 1].kind == LayerKind::kResidualEntry) {
      for (int e = l + 2; e < static_cast<int>(zm.hidden.size()); ++e) {
        if (zm.hidden[e].kind != LayerKind::kResidualExit) continue;
        const auto inv = vperm.inverse();
        auto& sm = zm.hidden[e].shortcut_map[new_task];
        for (int& q : sm) q = inv[q];
        break;
      }
    }
  }

  out.old2new = std::move(old2new);
  sl.validate();
  return out;
}

}  // namespace

std::vector<linalg::Permutation> zip_layer(
    ZippedModel& zm, int layer, TaskSet left_set, int new_task,
    const std::vector<std::pair<int, int>>& pairs, const Mat& merged) {
  return zip_layer_impl(zm, layer, left_set, new_task, pairs, merged)
      .view_perms;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

namespace {

std::vector<int> view_positions(const std::vector<int>& view_list,
                                const std::vector<int>& joint_ids) {
  std::vector<int> pos;
  pos.reserve(joint_ids.size());
  size_t cursor = 0;
  for (int id : joint_ids) {
    while (cursor < view_list.size() && view_list[cursor] != id) ++cursor;
    if (cursor == view_list.size())
      throw Error("zip: shared unit missing from task view");
    pos.push_back(static_cast<int>(cursor));
  }
  return pos;
}

Mat gather_candidates(const SharedLayer& sl, const std::vector<int>& cand,
                      const std::vector<int>& shared_in) {
  const int m = sl.in_mult;
  const int dim = static_cast<int>(shared_in.size()) * m + 1;
  Mat w(dim, static_cast<int>(cand.size()));
  for (size_t c = 0; c < cand.size(); ++c) {
    for (size_t vi = 0; vi < shared_in.size(); ++vi)
      w.block(static_cast<int64_t>(vi) * m, static_cast<int>(c), m, 1) =
          sl.weights.block(static_cast<int64_t>(shared_in[vi]) * m, cand[c], m,
                           1);
    w(dim - 1, static_cast<int>(c)) = sl.bias[cand[c]];
  }
  return w;
}

HessianEstimate reweight(const HessianEstimate& h, double weight) {
  return HessianEstimate(h.average(), h.n_samples(), weight, h.task());
}

// Placeholder over just the constant bias coordinate, used for layers with
// no shared inputs.
HessianEstimate bias_only_estimate(double weight, int task) {
  linalg::SpdMatrix m(1);
  Vec one = Vec::Ones(1);
  m.accumulate_outer(one);
  return HessianEstimate(m, 1, weight, task);
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// One full layer-by-layer pass merging the newest task (index T-1) into the
// fully-shared trunk of the older ones.
void zip_pass(ZipResult& res, const std::vector<ZipTask>& tasks,
              const MergePlan& plan, bool use_stored) {
  plan.validate();
  ZippedModel& zm = res.model;
  const int T = zm.num_tasks();
  const int nt = T - 1;
  const TaskSet full = all_tasks(T);
  const TaskSet left_set = full & ~(1u << nt);
  const int H = static_cast<int>(zm.hidden.size());
  if (!plan.layers.empty() && static_cast<int>(plan.layers.size()) != H)
    throw Error("MergePlan: per-layer targets must match hidden layer count");
  if (static_cast<int>(tasks.size()) != T)
    throw Error("zip: task data count mismatch");
  for (const auto& t : tasks)
    if (!t.train) throw Error("zip: every task needs training data");
  if (use_stored && static_cast<int>(res.joint_hessians.size()) != H)
    throw Error("zip: stored Hessians missing");

  const Mat calib_new = data::calibration_inputs(
      *tasks[nt].train, plan.calib_samples, plan.calib_seed + nt);
  Mat calib_left;
  if (!use_stored)
    calib_left = data::calibration_inputs(*tasks[0].train, plan.calib_samples,
                                          plan.calib_seed);

  std::vector<const data::Dataset*> train_ptrs;
  for (const auto& t : tasks) train_ptrs.push_back(t.train);
  std::vector<double> task_weights(T, plan.alpha / std::max(1, T - 1));
  task_weights[nt] = 1.0 - plan.alpha;

  std::vector<HessianEstimate> new_h;
  std::vector<std::vector<int>> new_units(H);
  std::vector<int> prev_old2new;  // translation of layer l-1 ids this pass

  for (int l = 0; l < H; ++l) {
    SharedLayer& sl = zm.hidden[l];
    LayerReport lr;
    lr.layer = l;

    if ((sl.kind == LayerKind::kResidualEntry ||
         sl.kind == LayerKind::kResidualExit)) {
      for (TaskSet s : sl.in_units)
        if ((s & full) != full)
          throw Error(
              "zip: residual block layers require the preceding layer to be "
              "fully merged");
    }

    std::vector<int> cand_l, cand_r;
    for (int u = 0; u < sl.n_units(); ++u) {
      if (sl.units[u] == left_set) cand_l.push_back(u);
      else if (sl.units[u] == (1u << nt)) cand_r.push_back(u);
    }
    lr.cand_left = static_cast<int>(cand_l.size());
    lr.cand_right = static_cast<int>(cand_r.size());

    const auto shared_in = shared_input_units(sl, full);
    lr.degenerate = shared_in.empty();

    const auto tgt = plan.target_for(l);
    const int avail =
        std::min(static_cast<int>(cand_l.size()), static_cast<int>(cand_r.size()));
    std::optional<int> count;
    if (tgt.share_count)
      count = std::min(*tgt.share_count, avail);
    else if (!tgt.threshold)
      count = avail;  // default: full sharing
    // Without shared inputs a merged unit would have no merged weights at
    // all, so degenerate layers never share and keep a bias-only curvature
    // record (which also keeps both sides' dimensions in agreement when the
    // tasks have different widths).
    if (lr.degenerate) count = 0;

    // Curvature over the shared input coordinates. The incoming task is
    // always measured fresh; the trunk side reuses the Hessians stored by
    // earlier zips when available.
    const int unit_size = sl.in_mult;
    std::vector<int> pos_new = shared_in;
    std::vector<int> pos_left = shared_in;
    if (l > 0) {
      const auto prev_view_new = zm.hidden[l - 1].task_units(nt);
      pos_new = view_positions(prev_view_new, shared_in);
      if (!use_stored)
        pos_left =
            view_positions(zm.hidden[l - 1].task_units(0), shared_in);
    }
    hessian::CalibrationSet cs_new{calib_new, nt};
    HessianEstimate h_right =
        lr.degenerate
            ? bias_only_estimate(1.0 - plan.alpha, nt)
            : hessian::layer_hessian(zm, nt, l, cs_new, 1.0 - plan.alpha,
                                     pos_new);
    std::optional<HessianEstimate> h_left;
    if (lr.degenerate) {
      h_left = bias_only_estimate(plan.alpha, 0);
    } else if (use_stored) {
      const auto& stored_units = res.hessian_in_units[l];
      std::vector<int> pos_of(sl.n_in_units(), -1);
      for (size_t k = 0; k < stored_units.size(); ++k) {
        const int old_id = stored_units[k];
        const int new_id =
            (l == 0 || prev_old2new.empty()) ? old_id : prev_old2new.at(old_id);
        if (new_id >= 0 && new_id < static_cast<int>(pos_of.size()))
          pos_of[new_id] = static_cast<int>(k);
      }
      std::vector<int> keep;
      for (int v : shared_in) {
        if (pos_of[v] < 0)
          throw Error("zip: stored Hessian misses a shared unit");
        keep.push_back(pos_of[v]);
      }
      h_left = reweight(
          hessian::restrict_units(res.joint_hessians[l], keep, unit_size),
          plan.alpha);
    } else {
      hessian::CalibrationSet cs_left{calib_left, 0};
      h_left =
          hessian::layer_hessian(zm, 0, l, cs_left, plan.alpha, pos_left);
    }

    const Mat wl = gather_candidates(sl, cand_l, shared_in);
    const Mat wr = gather_candidates(sl, cand_r, shared_in);
    Mat scores;
    if (lr.degenerate)
      scores = Mat::Zero(wl.cols(), wr.cols());
    else
      scores = score_matrix(wl, wr, *h_left, h_right);

    const auto sel = select_pairs(scores, count, tgt.threshold, plan.matching);
    lr.shared = static_cast<int>(sel.size());

    Mat merged(wl.rows(), static_cast<int>(sel.size()));
    std::vector<double> dvals;
    if (!sel.empty()) {
      const linalg::SpdMatrix s = weighted_sum(*h_left, h_right);
      const Mat hmb = h_right.weighted().matrix();
      // Update form of Eq. 12; exact for identical pairs even when the
      // damped joint curvature is singular along dead directions.
      Mat wa(wl.rows(), static_cast<int>(sel.size()));
      Mat diff(wl.rows(), static_cast<int>(sel.size()));
      for (size_t k = 0; k < sel.size(); ++k) {
        wa.col(static_cast<int>(k)) = wl.col(sel[k].first);
        diff.col(static_cast<int>(k)) =
            wl.col(sel[k].first) - wr.col(sel[k].second);
      }
      merged = wa - s.solve(hmb * diff);
      for (const auto& [i, j] : sel) dvals.push_back(scores(i, j));
    }
    if (!dvals.empty()) {
      lr.d_min = *std::min_element(dvals.begin(), dvals.end());
      lr.d_max = *std::max_element(dvals.begin(), dvals.end());
      lr.d_median = median_of(dvals);
      for (double d : dvals) lr.delta_e += d;
    }

    for (int t = 0; t < T; ++t)
      lr.err_pre.push_back(tasks[t].test ? data::evaluate(zm, t, *tasks[t].test)
                                         : -1.0);

    std::vector<std::pair<int, int>> joint_pairs;
    for (const auto& [i, j] : sel) joint_pairs.emplace_back(cand_l[i], cand_r[j]);
    const auto zout = zip_layer_impl(zm, l, left_set, nt, joint_pairs, merged);

    new_h.push_back(hessian::merge_hessians(*h_left, h_right));
    new_units[l] = shared_in;
    prev_old2new = zout.old2new;

    lr.retrain_iters = plan.retrain.layer_iterations(l);
    if (lr.retrain_iters > 0) {
      trainer::TrainConfig cfg = plan.retrain_cfg;
      cfg.iterations = lr.retrain_iters;
      cfg.seed = plan.retrain_cfg.seed + 7919ULL * l + T;
      trainer::retrain_joint(zm, train_ptrs, cfg, task_weights);
    }

    for (int t = 0; t < T; ++t)
      lr.err_post.push_back(
          tasks[t].test ? data::evaluate(zm, t, *tasks[t].test) : -1.0);

    res.report.layers.push_back(std::move(lr));
  }

  res.joint_hessians = std::move(new_h);
  res.hessian_in_units = std::move(new_units);
  zm.validate();
}

void finalize_report(ZipResult& res, const std::vector<ZipTask>& tasks) {
  res.report.params_zipped = res.model.param_count();
  res.report.final_errors.clear();
  for (int t = 0; t < res.model.num_tasks(); ++t)
    res.report.final_errors.push_back(
        tasks[t].test ? data::evaluate(res.model, t, *tasks[t].test) : -1.0);
}

}  // namespace

ZipResult zip_models(const std::vector<ZipTask>& tasks, const MergePlan& plan) {
  plan.validate();
  if (tasks.size() < 2) throw Error("zip_models: need at least two tasks");
  for (const auto& t : tasks) {
    if (!t.net) throw Error("zip_models: missing network");
    if (!t.train) throw Error("zip_models: missing training data");
  }
  ZipResult res;
  res.model = embed({tasks[0].net, tasks[1].net});
  res.report.params_original =
      tasks[0].net->param_count() + tasks[1].net->param_count();
  std::vector<ZipTask> cur = {tasks[0], tasks[1]};
  zip_pass(res, cur, plan, false);
  for (size_t i = 2; i < tasks.size(); ++i) {
    embed_additional(res.model, *tasks[i].net);
    cur.push_back(tasks[i]);
    res.report.params_original += tasks[i].net->param_count();
    zip_pass(res, cur, plan, true);
  }
  finalize_report(res, cur);
  return res;
}

ZipResult zip_additional(ZipResult joint,
                         const std::vector<const data::Dataset*>& existing_data,
                         const ZipTask& incoming, const MergePlan& plan) {
  plan.validate();
  if (!incoming.net || !incoming.train)
    throw Error("zip_additional: missing network or training data");
  if (static_cast<int>(existing_data.size()) != joint.model.num_tasks())
    throw Error("zip_additional: need training data for every existing task");
  std::vector<ZipTask> cur;
  for (const auto* d : existing_data) cur.push_back(ZipTask{nullptr, d, nullptr});
  embed_additional(joint.model, *incoming.net);
  cur.push_back(incoming);
  joint.report.params_original += incoming.net->param_count();
  zip_pass(joint, cur, plan, true);
  finalize_report(joint, cur);
  return joint;
}

double output_drift(const Network& original, const ZippedModel& zm, int task,
                    const Mat& calib_inputs) {
  const Mat a = forward(original, calib_inputs).output;
  const Mat b = forward_task(zm, task, calib_inputs).output;
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("output_drift: output shape mismatch");
  double s = 0.0;
  for (int i = 0; i < a.rows(); ++i) s += (a.row(i) - b.row(i)).norm();
  return s / std::sqrt(static_cast<double>(a.rows()));
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

void ZipReport::write(std::ostream& out) const {
  for (const auto& lr : layers) {
    out << "layer=" << lr.layer << " shared=" << lr.shared
        << " cand_left=" << lr.cand_left << " cand_right=" << lr.cand_right
        << " degenerate=" << (lr.degenerate ? 1 : 0) << " d_min=" << lr.d_min
        << " d_median=" << lr.d_median << " d_max=" << lr.d_max
        << " delta_e=" << lr.delta_e << " retrain_iters=" << lr.retrain_iters;
    for (size_t t = 0; t < lr.err_pre.size(); ++t)
      if (lr.err_pre[t] >= 0)
        out << " err_pre_task" << t << "=" << lr.err_pre[t];
    for (size_t t = 0; t < lr.err_post.size(); ++t)
      if (lr.err_post[t] >= 0)
        out << " err_post_task" << t << "=" << lr.err_post[t];
    out << "\n";
  }
  out << "params_original=" << params_original
      << " params_zipped=" << params_zipped
      << " params_saved=" << (params_original - params_zipped) << "\n";
  for (size_t t = 0; t < final_errors.size(); ++t)
    if (final_errors[t] >= 0)
      out << "final_err_task" << t << "=" << final_errors[t] << "\n";
}

}  // namespace mtz::zipper
