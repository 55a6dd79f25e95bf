#include "indigo/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

using nlohmann::json;

namespace indigo {

namespace {

template <typename E>
std::string enum_error(const std::string& value, std::initializer_list<const char*> allowed) {
    std::string msg = "invalid value '" + value + "', expected one of {";
    bool first = true;
    for (const char* a : allowed) {
        if (!first) msg += ", ";
        msg += a;
        first = false;
    }
    return msg + "}";
}

} // namespace

std::string to_string(PipelineKind k) {
    switch (k) {
        case PipelineKind::indigo: return "indigo";
        case PipelineKind::zero_shot: return "zero_shot";
        case PipelineKind::linear_eval: return "linear_eval";
        case PipelineKind::attention_eval: return "attention_eval";
        case PipelineKind::distillation: return "distillation";
        case PipelineKind::early_fusion: return "early_fusion";
        case PipelineKind::cross_attention: return "cross_attention";
        case PipelineKind::visual_agg: return "visual_agg";
    }
    return "?";
}

std::string to_string(LossMode m) { return m == LossMode::cls ? "cls" : "prompt"; }

std::string to_string(FinetuneMode m) {
    switch (m) {
        case FinetuneMode::frozen: return "frozen";
        case FinetuneMode::norm_layers: return "norm_layers";
        case FinetuneMode::last_layer: return "last_layer";
    }
    return "?";
}

std::string to_string(FusionMechanism m) {
    switch (m) {
        case FusionMechanism::concatenation: return "concatenation";
        case FusionMechanism::msa: return "msa";
        case FusionMechanism::mca: return "mca";
        case FusionMechanism::mixer: return "mixer";
    }
    return "?";
}

std::string to_string(Selection s) {
    return s == Selection::train_domain_val ? "train_domain_val" : "test_domain_val";
}

PipelineKind parse_pipeline_kind(const std::string& s) {
    for (auto k : {PipelineKind::indigo, PipelineKind::zero_shot, PipelineKind::linear_eval,
                   PipelineKind::attention_eval, PipelineKind::distillation,
                   PipelineKind::early_fusion, PipelineKind::cross_attention,
                   PipelineKind::visual_agg})
        if (to_string(k) == s) return k;
    throw ConfigError(enum_error<PipelineKind>(
        s, {"indigo", "zero_shot", "linear_eval", "attention_eval", "distillation",
            "early_fusion", "cross_attention", "visual_agg"}));
}

LossMode parse_loss_mode(const std::string& s) {
    if (s == "cls") return LossMode::cls;
    if (s == "prompt") return LossMode::prompt;
    throw ConfigError(enum_error<LossMode>(s, {"cls", "prompt"}));
}

FinetuneMode parse_finetune_mode(const std::string& s) {
    if (s == "frozen") return FinetuneMode::frozen;
    if (s == "norm_layers") return FinetuneMode::norm_layers;
    if (s == "last_layer") return FinetuneMode::last_layer;
    throw ConfigError(enum_error<FinetuneMode>(s, {"frozen", "norm_layers", "last_layer"}));
}

FusionMechanism parse_fusion_mechanism(const std::string& s) {
    if (s == "concatenation") return FusionMechanism::concatenation;
    if (s == "msa") return FusionMechanism::msa;
    if (s == "mca") return FusionMechanism::mca;
    if (s == "mixer") return FusionMechanism::mixer;
    throw ConfigError(enum_error<FusionMechanism>(s, {"concatenation", "msa", "mca", "mixer"}));
}

Selection parse_selection(const std::string& s) {
    if (s == "train_domain_val") return Selection::train_domain_val;
    if (s == "test_domain_val") return Selection::test_domain_val;
    throw ConfigError(enum_error<Selection>(s, {"train_domain_val", "test_domain_val"}));
}

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const int out = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const unsigned long long out = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return static_cast<std::uint64_t>(out);
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::vector<std::uint64_t> parse_seed_list(const std::string& key, const std::string& v) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, ',')) {
        part = trim(part);
        if (!part.empty()) out.push_back(parse_u64(key, part));
    }
    if (out.empty()) throw ConfigError(key + ": seed list must not be empty");
    return out;
}

} // namespace

void apply_preset(ExperimentConfig& cfg, const std::string& preset) {
    if (preset == "desk") {
        cfg = ExperimentConfig{}; // desk is the default construction
        return;
    }
    if (preset == "paper-scale") {
        cfg = ExperimentConfig{};
        cfg.preset = "paper-scale";
        cfg.batch_size = 240;
        cfg.fusion.layers = 3;
        cfg.fusion.heads = 6;
        cfg.fusion.token_dim = 384;
        cfg.dims.visual_dim = 384; // DeiT-S visual branch
        cfg.dims.visual_depth = 12;
        cfg.dims.visual_heads = 6;
        cfg.dims.visual_patch = 16;
        cfg.dims.mvit_dim = 768; // ViT-B/16 image encoder
        cfg.dims.mvit_depth = 12;
        cfg.dims.mvit_heads = 12;
        cfg.dims.embed_dim = 512;
        cfg.dims.text_dim = 512;
        cfg.dims.semantic_dim = 512;
        cfg.data.image_size = 224;
        cfg.data.classes = 65;
        cfg.data.domains = 4;
        return;
    }
    throw ConfigError("preset: expected 'desk' or 'paper-scale', got '" + preset + "'");
}

void apply_config_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "preset") {
        // handled up front by parse_config; applying again is harmless for
        // CLI overrides as long as it comes first there too
        apply_preset(cfg, value);
        return;
    }
    try {
        if (key == "pipeline.kind") cfg.pipeline.kind = parse_pipeline_kind(value);
        else if (key == "pipeline.loss_mode") cfg.pipeline.loss_mode = parse_loss_mode(value);
        else if (key == "pipeline.finetune_mvit") cfg.pipeline.finetune_mvit = parse_finetune_mode(value);
        else if (key == "fusion.layers") cfg.fusion.layers = parse_int(key, value);
        else if (key == "fusion.heads") cfg.fusion.heads = parse_int(key, value);
        else if (key == "fusion.token_dim") cfg.fusion.token_dim = parse_int(key, value);
        else if (key == "fusion.mechanism") cfg.fusion.mechanism = parse_fusion_mechanism(value);
        else if (key == "loss.lambda") cfg.loss.lambda = parse_double(key, value);
        else if (key == "loss.distill_temperature") cfg.loss.distill_temperature = parse_double(key, value);
        else if (key == "loss.distill_alpha") cfg.loss.distill_alpha = parse_double(key, value);
        else if (key == "loss.normalize_prompts") cfg.loss.normalize_prompts = parse_bool(key, value);
        else if (key == "optim.lr_visual") cfg.optim.lr_visual = parse_double(key, value);
        else if (key == "optim.lr_fusion") cfg.optim.lr_fusion = parse_double(key, value);
        else if (key == "optim.weight_decay") cfg.optim.weight_decay = parse_double(key, value);
        else if (key == "optim.momentum") cfg.optim.momentum = parse_double(key, value);
        else if (key == "optim.nesterov") cfg.optim.nesterov = parse_bool(key, value);
        else if (key == "schedule.epochs") cfg.schedule.epochs = parse_int(key, value);
        else if (key == "schedule.drop_epoch") cfg.schedule.drop_epoch = parse_int(key, value);
        else if (key == "schedule.drop_factor") cfg.schedule.drop_factor = parse_double(key, value);
        else if (key == "train.batch_size") cfg.batch_size = parse_int(key, value);
        else if (key == "run.seeds") cfg.seeds = parse_seed_list(key, value);
        else if (key == "data.classes") cfg.data.classes = parse_int(key, value);
        else if (key == "data.domains") cfg.data.domains = parse_int(key, value);
        else if (key == "data.per_cell") cfg.data.per_cell = parse_int(key, value);
        else if (key == "data.image_size") cfg.data.image_size = parse_int(key, value);
        else if (key == "data.channels") cfg.data.channels = parse_int(key, value);
        else if (key == "data.seed") cfg.data.seed = parse_u64(key, value);
        else if (key == "data.fraction") cfg.data.fraction = parse_double(key, value);
        else if (key == "data.root") cfg.data.root = value;
        else if (key == "protocol.selection") cfg.protocol.selection = parse_selection(value);
        else if (key == "protocol.open") cfg.protocol.open = parse_bool(key, value);
        else if (key == "protocol.open_seed") cfg.protocol.open_seed = parse_u64(key, value);
        else if (key == "protocol.val_fraction") cfg.protocol.val_fraction = parse_double(key, value);
        else if (key == "protocol.source") cfg.protocol.source = value;
        else if (key == "stub.steps") cfg.stub.steps = parse_int(key, value);
        else if (key == "stub.batch") cfg.stub.batch = parse_int(key, value);
        else if (key == "stub.lr") cfg.stub.lr = parse_double(key, value);
        else if (key == "stub.seed") cfg.stub.seed = parse_u64(key, value);
        else if (key == "stub.per_cell") cfg.stub.per_cell = parse_int(key, value);
        else if (key == "stub.checkpoint") cfg.stub.checkpoint = value;
        else if (key == "model.visual_dim") cfg.dims.visual_dim = parse_int(key, value);
        else if (key == "model.visual_depth") cfg.dims.visual_depth = parse_int(key, value);
        else if (key == "model.visual_heads") cfg.dims.visual_heads = parse_int(key, value);
        else if (key == "model.visual_patch") cfg.dims.visual_patch = parse_int(key, value);
        else if (key == "model.mvit_dim") cfg.dims.mvit_dim = parse_int(key, value);
        else if (key == "model.mvit_depth") cfg.dims.mvit_depth = parse_int(key, value);
        else if (key == "model.mvit_heads") cfg.dims.mvit_heads = parse_int(key, value);
        else if (key == "model.embed_dim") cfg.dims.embed_dim = parse_int(key, value);
        else if (key == "model.text_dim") cfg.dims.text_dim = parse_int(key, value);
        else if (key == "model.semantic_dim") cfg.dims.semantic_dim = parse_int(key, value);
        else throw ConfigError("unknown config key: " + key);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(key + ": " + e.what());
    }
}

void validate_config(const ExperimentConfig& cfg) {
    auto range = [](bool ok, const std::string& key, const std::string& rule) {
        if (!ok) throw ConfigError(key + ": " + rule);
    };
    range(cfg.loss.lambda >= 0.0 && cfg.loss.lambda <= 1.0, "loss.lambda", "must lie in [0, 1]");
    range(cfg.loss.distill_alpha >= 0.0 && cfg.loss.distill_alpha <= 1.0, "loss.distill_alpha",
          "must lie in [0, 1]");
    range(cfg.loss.distill_temperature > 0.0, "loss.distill_temperature", "must be positive");
    range(cfg.fusion.layers >= 0, "fusion.layers", "must be >= 0");
    range(cfg.fusion.heads >= 1, "fusion.heads", "must be >= 1");
    range(cfg.fusion.token_dim >= 1, "fusion.token_dim", "must be >= 1");
    range(cfg.fusion.token_dim % cfg.fusion.heads == 0, "fusion.token_dim",
          "must be divisible by fusion.heads");
    range(cfg.optim.momentum >= 0.0 && cfg.optim.momentum < 1.0, "optim.momentum",
          "must lie in [0, 1)");
    range(cfg.optim.lr_visual > 0.0, "optim.lr_visual", "must be positive");
    range(cfg.optim.lr_fusion > 0.0, "optim.lr_fusion", "must be positive");
    range(cfg.optim.weight_decay >= 0.0, "optim.weight_decay", "must be >= 0");
    range(cfg.schedule.epochs >= 0, "schedule.epochs", "must be >= 0");
    range(cfg.schedule.drop_epoch >= 1, "schedule.drop_epoch", "must be >= 1");
    range(cfg.schedule.drop_factor > 0.0 && cfg.schedule.drop_factor <= 1.0,
          "schedule.drop_factor", "must lie in (0, 1]");
    range(cfg.batch_size >= 1, "train.batch_size", "must be >= 1");
    range(!cfg.seeds.empty(), "run.seeds", "must not be empty");
    range(cfg.data.fraction > 0.0 && cfg.data.fraction <= 1.0, "data.fraction",
          "must lie in (0, 1]");
    range(cfg.data.image_size % cfg.dims.visual_patch == 0, "data.image_size",
          "must be divisible by model.visual_patch");
    range(cfg.dims.visual_dim % cfg.dims.visual_heads == 0, "model.visual_dim",
          "must be divisible by model.visual_heads");
    range(cfg.dims.mvit_dim % cfg.dims.mvit_heads == 0, "model.mvit_dim",
          "must be divisible by model.mvit_heads");
    range(cfg.protocol.val_fraction > 0.0 && cfg.protocol.val_fraction < 1.0,
          "protocol.val_fraction", "must lie in (0, 1)");
    range(cfg.dims.text_dim == cfg.dims.semantic_dim, "model.semantic_dim",
          "must equal model.text_dim (prompt bank lives in the text space)");
    range(cfg.stub.steps >= 0, "stub.steps", "must be >= 0");
    range(cfg.stub.batch >= 1, "stub.batch", "must be >= 1");
}

ExperimentConfig parse_config(const std::string& path) {
    ExperimentConfig cfg;
    std::vector<std::pair<std::string, std::string>> pairs;
    if (!path.empty()) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open config file: " + path);
        std::string line;
        int lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(path + ":" + std::to_string(lineno) +
                                  ": expected 'key = value', got '" + line + "'");
            pairs.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
    }
    // preset applies first regardless of position in the file
    for (const auto& [k, v] : pairs)
        if (k == "preset") apply_preset(cfg, v);
    for (const auto& [k, v] : pairs)
        if (k != "preset") apply_config_key(cfg, k, v);
    validate_config(cfg);
    return cfg;
}

json config_to_json(const ExperimentConfig& cfg) {
    json j;
    j["preset"] = cfg.preset;
    j["pipeline"] = {{"kind", to_string(cfg.pipeline.kind)},
                     {"loss_mode", to_string(cfg.pipeline.loss_mode)},
                     {"finetune_mvit", to_string(cfg.pipeline.finetune_mvit)}};
    j["fusion"] = {{"layers", cfg.fusion.layers},
                   {"heads", cfg.fusion.heads},
                   {"token_dim", cfg.fusion.token_dim},
                   {"mechanism", to_string(cfg.fusion.mechanism)}};
    j["loss"] = {{"lambda", cfg.loss.lambda},
                 {"distill_temperature", cfg.loss.distill_temperature},
                 {"distill_alpha", cfg.loss.distill_alpha},
                 {"normalize_prompts", cfg.loss.normalize_prompts}};
    j["optim"] = {{"lr_visual", cfg.optim.lr_visual},
                  {"lr_fusion", cfg.optim.lr_fusion},
                  {"weight_decay", cfg.optim.weight_decay},
                  {"momentum", cfg.optim.momentum},
                  {"nesterov", cfg.optim.nesterov}};
    j["schedule"] = {{"epochs", cfg.schedule.epochs},
                     {"drop_epoch", cfg.schedule.drop_epoch},
                     {"drop_factor", cfg.schedule.drop_factor}};
    j["train"] = {{"batch_size", cfg.batch_size}};
    j["run"] = {{"seeds", cfg.seeds}};
    j["data"] = {{"classes", cfg.data.classes},   {"domains", cfg.data.domains},
                 {"per_cell", cfg.data.per_cell}, {"image_size", cfg.data.image_size},
                 {"channels", cfg.data.channels}, {"seed", cfg.data.seed},
                 {"fraction", cfg.data.fraction}, {"root", cfg.data.root}};
    j["protocol"] = {{"selection", to_string(cfg.protocol.selection)},
                     {"open", cfg.protocol.open},
                     {"open_seed", cfg.protocol.open_seed},
                     {"val_fraction", cfg.protocol.val_fraction},
                     {"source", cfg.protocol.source}};
    j["stub"] = {{"steps", cfg.stub.steps}, {"batch", cfg.stub.batch},
                 {"lr", cfg.stub.lr},       {"seed", cfg.stub.seed},
                 {"per_cell", cfg.stub.per_cell}, {"checkpoint", cfg.stub.checkpoint}};
    j["model"] = {{"visual_dim", cfg.dims.visual_dim},   {"visual_depth", cfg.dims.visual_depth},
                  {"visual_heads", cfg.dims.visual_heads}, {"visual_patch", cfg.dims.visual_patch},
                  {"mvit_dim", cfg.dims.mvit_dim},       {"mvit_depth", cfg.dims.mvit_depth},
                  {"mvit_heads", cfg.dims.mvit_heads},   {"embed_dim", cfg.dims.embed_dim},
                  {"text_dim", cfg.dims.text_dim},       {"semantic_dim", cfg.dims.semantic_dim}};
    return j;
}

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig cfg;
    cfg.preset = j.at("preset").get<std::string>();
    const auto& p = j.at("pipeline");
    cfg.pipeline.kind = parse_pipeline_kind(p.at("kind").get<std::string>());
    cfg.pipeline.loss_mode = parse_loss_mode(p.at("loss_mode").get<std::string>());
    cfg.pipeline.finetune_mvit = parse_finetune_mode(p.at("finetune_mvit").get<std::string>());
    const auto& f = j.at("fusion");
    cfg.fusion.layers = f.at("layers").get<int>();
    cfg.fusion.heads = f.at("heads").get<int>();
    cfg.fusion.token_dim = f.at("token_dim").get<int>();
    cfg.fusion.mechanism = parse_fusion_mechanism(f.at("mechanism").get<std::string>());
    const auto& l = j.at("loss");
    cfg.loss.lambda = l.at("lambda").get<double>();
    cfg.loss.distill_temperature = l.at("distill_temperature").get<double>();
    cfg.loss.distill_alpha = l.at("distill_alpha").get<double>();
    cfg.loss.normalize_prompts = l.at("normalize_prompts").get<bool>();
    const auto& o = j.at("optim");
    cfg.optim.lr_visual = o.at("lr_visual").get<double>();
    cfg.optim.lr_fusion = o.at("lr_fusion").get<double>();
    cfg.optim.weight_decay = o.at("weight_decay").get<double>();
    cfg.optim.momentum = o.at("momentum").get<double>();
    cfg.optim.nesterov = o.at("nesterov").get<bool>();
    const auto& s = j.at("schedule");
    cfg.schedule.epochs = s.at("epochs").get<int>();
    cfg.schedule.drop_epoch = s.at("drop_epoch").get<int>();
    cfg.schedule.drop_factor = s.at("drop_factor").get<double>();
    cfg.batch_size = j.at("train").at("batch_size").get<int>();
    cfg.seeds = j.at("run").at("seeds").get<std::vector<std::uint64_t>>();
    const auto& d = j.at("data");
    cfg.data.classes = d.at("classes").get<int>();
    cfg.data.domains = d.at("domains").get<int>();
    cfg.data.per_cell = d.at("per_cell").get<int>();
    cfg.data.image_size = d.at("image_size").get<int>();
    cfg.data.channels = d.at("channels").get<int>();
    cfg.data.seed = d.at("seed").get<std::uint64_t>();
    cfg.data.fraction = d.at("fraction").get<double>();
    cfg.data.root = d.at("root").get<std::string>();
    const auto& pr = j.at("protocol");
    cfg.protocol.selection = parse_selection(pr.at("selection").get<std::string>());
    cfg.protocol.open = pr.at("open").get<bool>();
    cfg.protocol.open_seed = pr.at("open_seed").get<std::uint64_t>();
    cfg.protocol.val_fraction = pr.at("val_fraction").get<double>();
    cfg.protocol.source = pr.at("source").get<std::string>();
    const auto& st = j.at("stub");
    cfg.stub.steps = st.at("steps").get<int>();
    cfg.stub.batch = st.at("batch").get<int>();
    cfg.stub.lr = st.at("lr").get<double>();
    cfg.stub.seed = st.at("seed").get<std::uint64_t>();
    cfg.stub.per_cell = st.at("per_cell").get<int>();
    cfg.stub.checkpoint = st.at("checkpoint").get<std::string>();
    const auto& m = j.at("model");
    cfg.dims.visual_dim = m.at("visual_dim").get<int>();
    cfg.dims.visual_depth = m.at("visual_depth").get<int>();
    cfg.dims.visual_heads = m.at("visual_heads").get<int>();
    cfg.dims.visual_patch = m.at("visual_patch").get<int>();
    cfg.dims.mvit_dim = m.at("mvit_dim").get<int>();
    cfg.dims.mvit_depth = m.at("mvit_depth").get<int>();
    cfg.dims.mvit_heads = m.at("mvit_heads").get<int>();
    cfg.dims.embed_dim = m.at("embed_dim").get<int>();
    cfg.dims.text_dim = m.at("text_dim").get<int>();
    cfg.dims.semantic_dim = m.at("semantic_dim").get<int>();
    validate_config(cfg);
    return cfg;
}

} // namespace indigo
