#include "dpq/gar.hpp"

#include "dpq/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dpq {

std::string to_string(ReorderMode mode) {
    switch (mode) {
    case ReorderMode::none: return "none";
    case ReorderMode::gar: return "gar";
    case ReorderMode::full: return "full";
    }
    return "none";
}

ReorderMode reorder_mode_from_string(const std::string& s) {
    if (s == "none") return ReorderMode::none;
    if (s == "gar") return ReorderMode::gar;
    if (s == "full") return ReorderMode::full;
    throw ValidationError("unknown reorder mode: " + s);
}

bool GarPermutation::is_identity() const {
    for (std::size_t i = 0; i < perm.size(); ++i)
        if (perm[i] != i) return false;
    return true;
}

namespace {

GarPermutation from_order(std::vector<std::uint32_t> order) {
    GarPermutation p;
    p.inverse = std::move(order);
    p.perm.assign(p.inverse.size(), 0);
    for (std::size_t pos = 0; pos < p.inverse.size(); ++pos)
        p.perm[p.inverse[pos]] = static_cast<std::uint32_t>(pos);
    return p;
}

// Descending by score, ties toward the lower index.
void sort_by_score_desc(std::vector<std::uint32_t>& idx,
                        std::span<const double> score) {
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::uint32_t a, std::uint32_t b) {
                         return score[a] > score[b];
                     });
}

double group_score(std::span<const double> diag, std::size_t begin,
                   std::size_t end, GroupRankCriterion criterion) {
    if (criterion == GroupRankCriterion::max_diag) {
        double m = diag[begin];
        for (std::size_t i = begin + 1; i < end; ++i) m = std::max(m, diag[i]);
        return m;
    }
    // Mean of the top 10% (at least one) largest diagonal entries.
    std::vector<double> vals(diag.begin() + begin, diag.begin() + end);
    std::sort(vals.begin(), vals.end(), std::greater<>());
    const std::size_t k = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(0.1 * double(vals.size()))));
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) sum += vals[i];
    return sum / double(k);
}

} // namespace

GarPermutation identity_permutation(std::size_t n) {
    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    GarPermutation p = from_order(std::move(order));
    p.mode = ReorderMode::none;
    return p;
}

GarPermutation compute_gar_permutation(std::span<const double> hessian_diag,
                                       std::size_t group_size,
                                       GroupRankCriterion criterion) {
    if (group_size < 1)
        throw ValidationError("compute_gar_permutation: group_size must be >= 1");
    const std::size_t n = hessian_diag.size();
    const std::size_t n_groups = (n + group_size - 1) / group_size;

    std::vector<double> ranks(n_groups);
    std::vector<std::vector<std::uint32_t>> members(n_groups);
    for (std::size_t g = 0; g < n_groups; ++g) {
        const std::size_t begin = g * group_size;
        const std::size_t end = std::min(begin + group_size, n);
        members[g].resize(end - begin);
        std::iota(members[g].begin(), members[g].end(),
                  static_cast<std::uint32_t>(begin));
        sort_by_score_desc(members[g], hessian_diag);
        ranks[g] = group_score(hessian_diag, begin, end, criterion);
    }

    std::vector<std::uint32_t> group_order(n_groups);
    std::iota(group_order.begin(), group_order.end(), 0u);
    sort_by_score_desc(group_order, ranks);

    std::vector<std::uint32_t> order;
    order.reserve(n);
    for (std::uint32_t g : group_order)
        order.insert(order.end(), members[g].begin(), members[g].end());

    GarPermutation p = from_order(std::move(order));
    p.mode = ReorderMode::gar;
    p.group_size = group_size;
    p.group_ranks = std::move(ranks);
    p.group_order = std::move(group_order);
    return p;
}

GarPermutation compute_full_permutation(std::span<const double> hessian_diag) {
    std::vector<std::uint32_t> order(hessian_diag.size());
    std::iota(order.begin(), order.end(), 0u);
    sort_by_score_desc(order, hessian_diag);
    GarPermutation p = from_order(std::move(order));
    p.mode = ReorderMode::full;
    return p;
}

Matrix permute_columns(const Matrix& m, const GarPermutation& p) {
    if (m.cols != p.size())
        throw ValidationError("permute_columns: axis length mismatch");
    Matrix out(m.rows, m.cols);
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double* src = m.row_ptr(r);
        double* dst = out.row_ptr(r);
        for (std::size_t j = 0; j < m.cols; ++j)
            dst[j] = src[p.inverse[j]];
    }
    return out;
}

Matrix unpermute_columns(const Matrix& m, const GarPermutation& p) {
    if (m.cols != p.size())
        throw ValidationError("unpermute_columns: axis length mismatch");
    Matrix out(m.rows, m.cols);
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double* src = m.row_ptr(r);
        double* dst = out.row_ptr(r);
        for (std::size_t j = 0; j < m.cols; ++j)
            dst[p.inverse[j]] = src[j];
    }
    return out;
}

Matrix permute_symmetric(const Matrix& h, const GarPermutation& p) {
    if (h.rows != p.size() || h.cols != p.size())
        throw ValidationError("permute_symmetric: dimension mismatch");
    Matrix out(h.rows, h.cols);
    for (std::size_t i = 0; i < h.rows; ++i)
        for (std::size_t j = 0; j < h.cols; ++j)
            out(i, j) = h(p.inverse[i], p.inverse[j]);
    return out;
}

std::vector<double> permute_vector(std::span<const double> v,
                                   const GarPermutation& p) {
    if (v.size() != p.size())
        throw ValidationError("permute_vector: length mismatch");
    std::vector<double> out(v.size());
    for (std::size_t j = 0; j < v.size(); ++j)
        out[j] = v[p.inverse[j]];
    return out;
}

std::vector<double> unpermute_vector(std::span<const double> v,
                                     const GarPermutation& p) {
    if (v.size() != p.size())
        throw ValidationError("unpermute_vector: length mismatch");
    std::vector<double> out(v.size());
    for (std::size_t j = 0; j < v.size(); ++j)
        out[p.inverse[j]] = v[j];
    return out;
}

std::vector<GroupSegment> group_segments(const GarPermutation& p, std::size_t n,
                                         std::size_t group_size) {
    if (group_size < 1)
        throw ValidationError("group_segments: group_size must be >= 1");
    std::vector<GroupSegment> segs;
    if (p.mode == ReorderMode::gar && !p.group_order.empty()) {
        std::size_t pos = 0;
        for (std::uint32_t g : p.group_order) {
            const std::size_t begin = std::size_t(g) * p.group_size;
            const std::size_t len = std::min(p.group_size, n - begin);
            segs.push_back({pos, len, g});
            pos += len;
        }
    } else {
        const std::size_t n_groups = (n + group_size - 1) / group_size;
        for (std::size_t g = 0; g < n_groups; ++g) {
            const std::size_t start = g * group_size;
            segs.push_back({start, std::min(group_size, n - start),
                            static_cast<std::uint32_t>(g)});
        }
    }
    return segs;
}

} // namespace dpq
