#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "indigo/protocol.hpp"

namespace indigo {

/// Configuration / input errors map to CLI exit code 1; everything else
/// (numeric failures, I/O at runtime) maps to exit code 2.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

enum class PipelineKind {
    indigo,
    zero_shot,
    linear_eval,
    attention_eval,
    distillation,
    early_fusion,
    cross_attention,
    visual_agg
};

enum class LossMode { cls, prompt };
enum class FinetuneMode { frozen, norm_layers, last_layer };
enum class FusionMechanism { concatenation, msa, mca, mixer };

std::string to_string(PipelineKind k);
std::string to_string(LossMode m);
std::string to_string(FinetuneMode m);
std::string to_string(FusionMechanism m);
std::string to_string(Selection s);

PipelineKind parse_pipeline_kind(const std::string& s);
LossMode parse_loss_mode(const std::string& s);
FinetuneMode parse_finetune_mode(const std::string& s);
FusionMechanism parse_fusion_mechanism(const std::string& s);
Selection parse_selection(const std::string& s);

struct PipelineSpecConfig {
    PipelineKind kind = PipelineKind::indigo;
    LossMode loss_mode = LossMode::cls;
    FinetuneMode finetune_mvit = FinetuneMode::frozen;
};

struct FusionConfig {
    int layers = 3; // K
    int heads = 4;
    int token_dim = 64; // d_f
    FusionMechanism mechanism = FusionMechanism::msa;
};

struct LossConfig {
    double lambda = 1.0;
    double distill_temperature = 3.0;
    double distill_alpha = 0.5;
    bool normalize_prompts = false;
};

struct OptimConfig {
    double lr_visual = 1e-3;
    double lr_fusion = 5e-3;
    double weight_decay = 5e-5;
    double momentum = 0.9;
    bool nesterov = true;
};

struct ScheduleConfig {
    int epochs = 10;
    int drop_epoch = 6;
    double drop_factor = 0.1;
};

struct DataConfig {
    int classes = 8;
    int domains = 4;
    int per_cell = 60;
    int image_size = 16;
    int channels = 3;
    std::uint64_t seed = 7;
    double fraction = 1.0;
    std::string root; // load this directory instead of generating
};

struct ProtocolOptions {
    Selection selection = Selection::train_domain_val;
    bool open = false;
    std::uint64_t open_seed = 1;
    double val_fraction = 0.2;
    std::string source; // limited-sources: the single source domain name
};

struct StubConfig {
    int steps = 600;
    int batch = 32;
    double lr = 0.02;
    std::uint64_t seed = 100;
    int per_cell = 40;
    std::string checkpoint; // load instead of pretraining in-process
};

struct ModelDims {
    int visual_dim = 64;
    int visual_depth = 4;
    int visual_heads = 4;
    int visual_patch = 4;
    int mvit_dim = 64;
    int mvit_depth = 2;
    int mvit_heads = 4;
    int embed_dim = 32;    // d_e
    int text_dim = 32;     // d_t
    int semantic_dim = 32; // d_s
};

struct ExperimentConfig {
    std::string preset = "desk";
    PipelineSpecConfig pipeline;
    FusionConfig fusion;
    LossConfig loss;
    OptimConfig optim;
    ScheduleConfig schedule;
    int batch_size = 32;
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    DataConfig data;
    ProtocolOptions protocol;
    StubConfig stub;
    ModelDims dims;
};

/// Parse a flat "dotted.key = value" config file. Unknown keys, malformed
/// values and out-of-range settings are hard errors naming the key. An empty
/// (or missing-path "") file yields the desk defaults.
ExperimentConfig parse_config(const std::string& path);

/// Apply one key/value pair; exposed for CLI overrides.
void apply_config_key(ExperimentConfig& cfg, const std::string& key, const std::string& value);

void apply_preset(ExperimentConfig& cfg, const std::string& preset);

void validate_config(const ExperimentConfig& cfg);

nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const nlohmann::json& j);

} // namespace indigo
