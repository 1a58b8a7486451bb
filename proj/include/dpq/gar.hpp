#pragma once

#include "dpq/matrix.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dpq {

enum class ReorderMode { none, gar, full };

/// How groups are ranked against each other under group-aware reordering.
enum class GroupRankCriterion { max_diag, top_fraction_mean };

std::string to_string(ReorderMode mode);
ReorderMode reorder_mode_from_string(const std::string& s);

/// Column permutation of the input features. In `gar` mode the permutation
/// is constrained so every original group of `group_size` consecutive
/// columns maps onto one contiguous block; `full` sorts globally; `none` is
/// the identity.
struct GarPermutation {
    ReorderMode mode = ReorderMode::none;
    std::size_t group_size = 0;            // 0 when not group-structured
    std::vector<std::uint32_t> perm;       // original index -> permuted position
    std::vector<std::uint32_t> inverse;    // permuted position -> original index
    std::vector<double> group_ranks;       // ranking score per original group
    std::vector<std::uint32_t> group_order; // permuted group slot -> original group

    std::size_t size() const { return perm.size(); }
    bool is_identity() const;
};

GarPermutation identity_permutation(std::size_t n);

/// Within each group, indices sorted by Hessian diagonal descending; whole
/// groups sorted by their ranking score descending. Ties break toward the
/// lower original index.
GarPermutation compute_gar_permutation(std::span<const double> hessian_diag,
                                       std::size_t group_size,
                                       GroupRankCriterion criterion =
                                           GroupRankCriterion::max_diag);

/// Unrestricted global sort by Hessian diagonal descending, ties toward the
/// lower original index.
GarPermutation compute_full_permutation(std::span<const double> hessian_diag);

/// out(r, perm[c]) = in(r, c)
Matrix permute_columns(const Matrix& m, const GarPermutation& p);
/// Inverse of permute_columns.
Matrix unpermute_columns(const Matrix& m, const GarPermutation& p);
/// Symmetric row+column permutation (Hessians).
Matrix permute_symmetric(const Matrix& h, const GarPermutation& p);

std::vector<double> permute_vector(std::span<const double> v, const GarPermutation& p);
std::vector<double> unpermute_vector(std::span<const double> v, const GarPermutation& p);

/// One quantization group on the permuted axis.
struct GroupSegment {
    std::size_t start = 0;
    std::size_t length = 0;
    std::uint32_t storage_group = 0; // param slot in the stored artifact
};

/// Partition of the permuted axis into quantization groups. For gar the
/// segments are the reordered original groups (params land back on original
/// group slots); for none/full they are arithmetic runs of group_size.
std::vector<GroupSegment> group_segments(const GarPermutation& p, std::size_t n,
                                         std::size_t group_size);

} // namespace dpq
