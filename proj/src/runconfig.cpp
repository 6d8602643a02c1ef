#include "p3d/runconfig.hpp"

#include <fstream>

namespace p3d {

void check_allowed_keys(const Json& obj, const std::vector<std::string>& allowed,
                        const std::string& context) {
    if (!obj.is_object()) throw std::runtime_error(context + ": expected a JSON object");
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            std::string msg = context + ": unknown key '" + key + "' (allowed:";
            for (const auto& a : allowed) msg += " " + a;
            throw std::runtime_error(msg + ")");
        }
    }
}

Json model_config_to_json(const ModelConfig& cfg) {
    Json j;
    j["in_channels"] = cfg.in_channels;
    j["out_channels"] = cfg.out_channels;
    j["embed_dims"] = cfg.embed_dims;
    j["groups"] = cfg.groups;
    j["transformer_dim"] = cfg.transformer_dim;
    j["heads"] = cfg.heads;
    j["window"] = cfg.window;
    j["depth"] = cfg.depth;
    j["patch"] = cfg.patch;
    j["cond_dim"] = cfg.cond_dim;
    j["freq_dim"] = cfg.freq_dim;
    j["n_params"] = cfg.n_params;
    j["n_labels"] = cfg.n_labels;
    j["bias_hidden"] = cfg.bias_hidden;
    j["pad_mode"] = cfg.pad_mode == PadMode::Zero ? "zero" : "circular";
    j["dtype"] = dtype_name(cfg.dtype);
    return j;
}

ModelConfig model_config_from_json(const Json& j) {
    check_allowed_keys(j, {"preset", "in_channels", "out_channels", "embed_dims", "groups",
                           "transformer_dim", "heads", "window", "depth", "patch", "cond_dim",
                           "freq_dim", "n_params", "n_labels", "bias_hidden", "pad_mode", "dtype"},
                       "model");
    ModelConfig cfg;
    if (j.contains("preset")) cfg = ModelConfig::preset(j["preset"].get<std::string>());
    if (j.contains("in_channels")) cfg.in_channels = j["in_channels"].get<int64_t>();
    if (j.contains("out_channels")) cfg.out_channels = j["out_channels"].get<int64_t>();
    if (j.contains("embed_dims")) cfg.embed_dims = j["embed_dims"].get<std::vector<int64_t>>();
    if (j.contains("groups")) cfg.groups = j["groups"].get<int>();
    if (j.contains("transformer_dim")) cfg.transformer_dim = j["transformer_dim"].get<int64_t>();
    if (j.contains("heads")) cfg.heads = j["heads"].get<int>();
    if (j.contains("window")) cfg.window = j["window"].get<int>();
    if (j.contains("depth")) cfg.depth = j["depth"].get<int>();
    if (j.contains("patch")) cfg.patch = j["patch"].get<int>();
    if (j.contains("cond_dim")) cfg.cond_dim = j["cond_dim"].get<int64_t>();
    if (j.contains("freq_dim")) cfg.freq_dim = j["freq_dim"].get<int64_t>();
    if (j.contains("n_params")) cfg.n_params = j["n_params"].get<int64_t>();
    if (j.contains("n_labels")) cfg.n_labels = j["n_labels"].get<int64_t>();
    if (j.contains("bias_hidden")) cfg.bias_hidden = j["bias_hidden"].get<int64_t>();
    if (j.contains("pad_mode")) cfg.pad_mode = pad_mode_from_name(j["pad_mode"].get<std::string>());
    if (j.contains("dtype")) cfg.dtype = dtype_from_name(j["dtype"].get<std::string>());
    cfg.validate();
    return cfg;
}

Json context_config_to_json(const ContextConfig& cfg) {
    Json j;
    j["layers"] = cfg.layers;
    j["latent_dim"] = cfg.latent_dim;
    j["heads"] = cfg.heads;
    j["kernel"] = cfg.kernel;
    j["mlp_hidden"] = cfg.mlp_hidden;
    return j;
}

ContextConfig context_config_from_json(const Json& j) {
    check_allowed_keys(j, {"layers", "latent_dim", "heads", "kernel", "mlp_hidden"}, "context");
    ContextConfig cfg;
    if (j.contains("layers")) cfg.layers = j["layers"].get<int>();
    if (j.contains("latent_dim")) cfg.latent_dim = j["latent_dim"].get<int64_t>();
    if (j.contains("heads")) cfg.heads = j["heads"].get<int>();
    if (j.contains("kernel")) cfg.kernel = j["kernel"].get<std::string>();
    if (j.contains("mlp_hidden")) cfg.mlp_hidden = j["mlp_hidden"].get<int64_t>();
    return cfg;
}

TrainSetup train_setup_from_json(const Json& j) {
    check_allowed_keys(j, {"mode", "objective", "crop", "batch", "lr", "weight_decay", "ema_decay",
                           "sigma_min", "p_enc", "p_dec", "precompute_latents", "steps", "log_every",
                           "ckpt_every"},
                       "train");
    TrainSetup s;
    if (j.contains("mode")) s.mode = train_mode_from_name(j["mode"].get<std::string>());
    if (j.contains("objective")) {
        const std::string o = j["objective"].get<std::string>();
        if (o == "supervised") s.objective = TrainSetup::Objective::Supervised;
        else if (o == "flow_matching") s.objective = TrainSetup::Objective::FlowMatching;
        else throw std::runtime_error("train: unknown objective '" + o + "'");
    }
    if (j.contains("crop")) s.crop = j["crop"].get<int64_t>();
    if (j.contains("batch")) s.batch = j["batch"].get<int64_t>();
    if (j.contains("lr")) s.lr = j["lr"].get<double>();
    if (j.contains("weight_decay")) s.weight_decay = j["weight_decay"].get<double>();
    if (j.contains("ema_decay")) s.ema_decay = j["ema_decay"].get<double>();
    if (j.contains("sigma_min")) s.sigma_min = j["sigma_min"].get<double>();
    if (j.contains("p_enc")) s.p_enc = j["p_enc"].get<double>();
    if (j.contains("p_dec")) s.p_dec = j["p_dec"].get<double>();
    if (j.contains("precompute_latents")) s.precompute_latents = j["precompute_latents"].get<bool>();
    if (j.contains("steps")) s.steps = j["steps"].get<int64_t>();
    if (j.contains("log_every")) s.log_every = j["log_every"].get<int64_t>();
    if (j.contains("ckpt_every")) s.ckpt_every = j["ckpt_every"].get<int64_t>();
    if (s.p_enc < 0 || s.p_enc > 1 || s.p_dec < 0 || s.p_dec > 1)
        throw std::runtime_error("train: p_enc/p_dec must be in [0,1]");
    return s;
}

Json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config: " + path);
    Json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error("invalid JSON in " + path + ": " + e.what());
    }
    return j;
}

}  // namespace p3d
