#pragma once

#include <set>
#include <vector>

#include "indigo/pipelines.hpp"
#include "indigo/protocol.hpp"

namespace indigo {

// Number of fixed gradient-accumulation chunks per batch. Chunks are
// reduced in index order, so results are bit-identical for any OpenMP
// thread count (including 1).
constexpr int kGradChunks = 8;

template <typename T>
using ParamSnapshot = std::vector<Tensor<T>>;

template <typename T>
ParamSnapshot<T> snapshot_params(const ParamStore<T>& store) {
    ParamSnapshot<T> snap;
    snap.reserve(store.size());
    for (int i = 0; i < store.size(); ++i) snap.push_back(store.value(i));
    return snap;
}

template <typename T>
void restore_params(ParamStore<T>& store, const ParamSnapshot<T>& snap) {
    for (int i = 0; i < store.size(); ++i) store.value(i) = snap[i];
}

/// Top-1 accuracy of the model over dataset indices (open classes excluded
/// when open_classes is non-null). Sample predictions are independent and
/// write fixed slots, so the parallel loop is deterministic.
template <typename T>
double evaluate_indices(Model<T>& m, const DomainDataset& ds, const std::vector<int>& indices,
                        const std::set<int>* open_classes = nullptr) {
    const int n = static_cast<int>(indices.size());
    std::vector<int> preds(n), labels(n);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        SampleRef<T> ref{&ds.samples[indices[i]], indices[i]};
        preds[i] = predict_sample(m, ref);
        labels[i] = ds.samples[indices[i]].class_id;
    }
    return label_accuracy(preds, labels, open_classes);
}

template <typename T>
struct TrainResult {
    std::vector<ParamSnapshot<T>> epoch_snapshots;
    std::vector<double> val_accs;
    std::vector<double> test_accs;    // filled only under test-domain selection
    std::vector<double> train_losses; // mean loss per epoch
};

/// Mini-batch SGD over the source training set: seeded shuffling, two
/// parameter groups at their configured rates, the step schedule, and a
/// per-epoch snapshot + source-validation accuracy. NaN losses abort.
template <typename T>
TrainResult<T> train_loop(Model<T>& m, const DomainDataset& ds, const std::vector<int>& train_idx,
                          const std::vector<int>& val_idx, const std::vector<int>& test_idx,
                          std::uint64_t run_seed, const std::set<int>* open_eval = nullptr) {
    const auto& cfg = m.cfg;
    TrainResult<T> result;
    if (cfg.pipeline.kind == PipelineKind::zero_shot) {
        if (cfg.schedule.epochs > 0)
            throw ConfigError("zero_shot forbids training; set schedule.epochs = 0");
        return result;
    }

    SgdOptimizer<T> opt(m.store, cfg.optim);
    std::vector<int> visual_group, fusion_group;
    for (int i = 0; i < m.store.size(); ++i) {
        if (!m.store.trainable(i)) continue;
        const std::string& name = m.store.name(i);
        // the visual branch learns at lr_visual; unfrozen bundle parameters
        // ride along with it, everything fusion-side at lr_fusion
        if (name.rfind("visual.", 0) == 0 || is_bundle_param(name)) visual_group.push_back(i);
        else fusion_group.push_back(i);
    }
    opt.add_group(visual_group, cfg.optim.lr_visual);
    opt.add_group(fusion_group, cfg.optim.lr_fusion);

    std::vector<GradSink<T>> chunk_sinks;
    for (int c = 0; c < kGradChunks; ++c) chunk_sinks.emplace_back(m.store.size());
    GradSink<T> total(m.store.size());

    std::vector<int> order = train_idx;
    Rng shuffle_rng(fold_seed(run_seed, 0x5affULL));
    for (int epoch = 1; epoch <= cfg.schedule.epochs; ++epoch) {
        const double lr_scale =
            lr_schedule(epoch, 1.0, cfg.schedule.drop_epoch, cfg.schedule.drop_factor);
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        long batches = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
            const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
            const int bn = static_cast<int>(b1 - b0);
            std::vector<double> chunk_losses(kGradChunks, 0.0);
            for (auto& s : chunk_sinks) s.clear();
#pragma omp parallel for schedule(static)
            for (int c = 0; c < kGradChunks; ++c) {
                for (int j = c; j < bn; j += kGradChunks) {
                    const int idx = order[b0 + j];
                    Tape<T> tape(&m.store);
                    SampleRef<T> ref{&ds.samples[idx], idx};
                    auto out = pipeline_forward(tape, m, ref, ds.samples[idx].class_id);
                    chunk_losses[c] += static_cast<double>(tape.val(out.loss).data[0]);
                    tape.backward(out.loss, T(1.0 / bn), &chunk_sinks[c]);
                }
            }
            total.clear();
            double batch_loss = 0.0;
            for (int c = 0; c < kGradChunks; ++c) {
                total.add_from(chunk_sinks[c], m.store);
                batch_loss += chunk_losses[c];
            }
            batch_loss /= bn;
            if (std::isnan(batch_loss))
                throw std::runtime_error("train_loop: loss became NaN at epoch " +
                                         std::to_string(epoch));
            opt.step(total, lr_scale);
            epoch_loss += batch_loss;
            ++batches;
        }
        result.train_losses.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
        result.val_accs.push_back(evaluate_indices(m, ds, val_idx, open_eval));
        if (!test_idx.empty())
            result.test_accs.push_back(evaluate_indices(m, ds, test_idx, open_eval));
        result.epoch_snapshots.push_back(snapshot_params(m.store));
    }
    return result;
}

} // namespace indigo
