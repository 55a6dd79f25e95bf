#include "indigo/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "indigo/rng.hpp"

namespace indigo {

std::vector<LeaveOneOutSplit> leave_one_out_splits(int n_domains) {
    if (n_domains < 2) throw std::invalid_argument("leave-one-out needs at least 2 domains");
    std::vector<LeaveOneOutSplit> out;
    for (int target = 0; target < n_domains; ++target) {
        LeaveOneOutSplit s;
        s.target = target;
        for (int d = 0; d < n_domains; ++d)
            if (d != target) s.sources.push_back(d);
        out.push_back(std::move(s));
    }
    return out;
}

bool OpenSplitSpec::is_open(int class_id) const {
    return std::binary_search(open_classes.begin(), open_classes.end(), class_id);
}

std::set<int> OpenSplitSpec::non_open() const {
    std::set<int> out;
    for (const auto& [dom, labels] : per_domain_labels) out.insert(labels.begin(), labels.end());
    return out;
}

OpenSplitSpec make_open_splits(int n_classes, const std::vector<int>& source_domains,
                               std::uint64_t seed) {
    const int s = static_cast<int>(source_domains.size());
    if (s < 2) throw std::invalid_argument("open split needs at least 2 source domains");
    if (n_classes < s + 2)
        throw std::invalid_argument("open split needs at least #sources + 2 classes");

    std::vector<int> ranked(n_classes);
    std::iota(ranked.begin(), ranked.end(), 0);
    Rng rng(fold_seed(seed, 0x0be7ULL));
    rng.shuffle(ranked);

    const int open_count = (n_classes + 4) / 5; // ceil(C / 5)
    const int usable = n_classes - open_count;
    const int window = usable - s + 1; // >= 1 guaranteed by the precondition

    OpenSplitSpec spec;
    for (int j = 0; j < s; ++j) {
        std::vector<int> labels(ranked.begin() + j, ranked.begin() + j + window);
        std::sort(labels.begin(), labels.end());
        spec.per_domain_labels[source_domains[j]] = std::move(labels);
    }
    spec.open_classes.assign(ranked.begin() + usable, ranked.end());
    std::sort(spec.open_classes.begin(), spec.open_classes.end());
    return spec;
}

DomainDataset subsample_fraction(const DomainDataset& ds, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0) || fraction > 1.0)
        throw std::invalid_argument("fraction must lie in (0, 1]");
    DomainDataset out;
    out.class_names = ds.class_names;
    out.domain_names = ds.domain_names;
    std::vector<int> keep;
    for (int d = 0; d < ds.n_domains(); ++d) {
        auto idx = ds.indices_of_domain(d);
        if (idx.empty()) continue;
        const int want = static_cast<int>(std::ceil(fraction * static_cast<double>(idx.size())));
        Rng rng(fold_seed(seed, 0x5ab5ULL, static_cast<std::uint64_t>(d)));
        rng.shuffle(idx);
        idx.resize(want);
        keep.insert(keep.end(), idx.begin(), idx.end());
    }
    std::sort(keep.begin(), keep.end());
    if (keep.empty()) throw std::invalid_argument("subsample produced an empty dataset");
    for (int i : keep) out.samples.push_back(ds.samples[i]);
    return out;
}

double lr_schedule(int epoch, double base_lr, int drop_epoch, double drop_factor) {
    if (epoch < 1) throw std::invalid_argument("epochs are 1-based");
    return epoch <= drop_epoch ? base_lr : base_lr * drop_factor;
}

int select_model(Selection criterion, const std::vector<double>& val_accs,
                 const std::vector<double>& test_accs) {
    const auto& scores = criterion == Selection::train_domain_val ? val_accs : test_accs;
    if (scores.empty()) throw std::invalid_argument("select_model: empty score list");
    int best = 0;
    for (int i = 1; i < static_cast<int>(scores.size()); ++i)
        if (scores[i] > scores[best]) best = i;
    return best;
}

double label_accuracy(const std::vector<int>& predictions, const std::vector<int>& labels,
                      const std::set<int>* open_classes) {
    if (predictions.size() != labels.size())
        throw std::invalid_argument("accuracy: prediction/label length mismatch");
    long correct = 0, total = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (open_classes && open_classes->count(labels[i])) continue;
        ++total;
        if (predictions[i] == labels[i]) ++correct;
    }
    if (total == 0) throw std::invalid_argument("accuracy: no non-open samples to score");
    return static_cast<double>(correct) / static_cast<double>(total);
}

HoldoutSplit stratified_holdout(const DomainDataset& ds, const std::vector<int>& domain_indices,
                                double val_fraction, std::uint64_t seed) {
    std::map<int, std::vector<int>> by_class;
    for (int i : domain_indices) by_class[ds.samples[i].class_id].push_back(i);
    HoldoutSplit split;
    for (auto& [cls, idx] : by_class) {
        Rng rng(fold_seed(seed, 0x401d07ULL, static_cast<std::uint64_t>(cls)));
        rng.shuffle(idx);
        const int n_val = static_cast<int>(std::floor(val_fraction * static_cast<double>(idx.size())));
        for (std::size_t k = 0; k < idx.size(); ++k)
            (static_cast<int>(k) < n_val ? split.val : split.train).push_back(idx[k]);
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    return split;
}

double mean_of(const std::vector<double>& xs) {
    if (xs.empty()) throw std::invalid_argument("mean of empty list");
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double sample_std(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    const double m = mean_of(xs);
    double acc = 0.0;
    for (double x : xs) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(xs.size() - 1));
}

double average_of_domain_means(const std::vector<double>& domain_means) {
    return mean_of(domain_means);
}

} // namespace indigo
