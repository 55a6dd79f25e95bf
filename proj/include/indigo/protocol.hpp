#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "indigo/data.hpp"

namespace indigo {

struct LeaveOneOutSplit {
    std::vector<int> sources;
    int target = 0;
};

/// One configuration per domain: that domain as target, the rest as sources.
std::vector<LeaveOneOutSplit> leave_one_out_splits(int n_domains);

/// Disparate source label sets plus a reserved open tail. Construction:
/// classes are deterministically shuffled by seed into a rank order; the
/// last ceil(C/5) ranks are open (in no source); source domain j takes the
/// ranked window [j, j + R - S], so head/tail ranks appear in exactly one
/// source and the middle ranks in all of them.
struct OpenSplitSpec {
    std::map<int, std::vector<int>> per_domain_labels; // domain id -> sorted class ids
    std::vector<int> open_classes;                     // sorted, absent from all sources

    bool is_open(int class_id) const;
    std::set<int> non_open() const;
};

OpenSplitSpec make_open_splits(int n_classes, const std::vector<int>& source_domains,
                               std::uint64_t seed);

/// Per-domain uniform subsampling without replacement of ceil(fraction * n_d)
/// samples; selected indices keep their original order.
DomainDataset subsample_fraction(const DomainDataset& ds, double fraction, std::uint64_t seed);

/// Step schedule: base rate through drop_epoch, then base * factor.
double lr_schedule(int epoch, double base_lr, int drop_epoch = 6, double drop_factor = 0.1);

enum class Selection { train_domain_val, test_domain_val };

/// Index of the chosen epoch (ties to the earliest).
int select_model(Selection criterion, const std::vector<double>& val_accs,
                 const std::vector<double>& test_accs);

/// Top-1 accuracy; when open_classes is non-null, samples from open classes
/// are excluded from numerator and denominator.
double label_accuracy(const std::vector<int>& predictions, const std::vector<int>& labels,
                      const std::set<int>* open_classes = nullptr);

/// 80/20-style per-class stratified holdout of one domain's sample indices.
struct HoldoutSplit {
    std::vector<int> train;
    std::vector<int> val;
};
HoldoutSplit stratified_holdout(const DomainDataset& ds, const std::vector<int>& domain_indices,
                                double val_fraction, std::uint64_t seed);

struct DomainAggregate {
    double mean = 0.0;
    double stddev = 0.0; // sample std, 0 for a single seed
    std::vector<double> seeds;
};

double mean_of(const std::vector<double>& xs);
double sample_std(const std::vector<double>& xs);

/// Average column convention: unweighted mean of per-domain means.
double average_of_domain_means(const std::vector<double>& domain_means);

} // namespace indigo
