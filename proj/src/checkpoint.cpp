#include "p3d/checkpoint.hpp"

#include <filesystem>
#include <fstream>

#include "p3d/blob.hpp"
#include "p3d/runconfig.hpp"
#include "p3d/training.hpp"

namespace p3d {

namespace {

namespace fs = std::filesystem;

void write_store(const std::string& dir, const ParamStore& params) {
    fs::create_directories(dir);
    for (const auto& [name, v] : params.items())
        write_tensor_blob(dir + "/" + name + ".bin", name, v->value);
}

}  // namespace

void save_checkpoint(const std::string& dir, const P3DModel& model, const CheckpointExtras& extras) {
    fs::create_directories(dir);
    Json manifest;
    manifest["config"] = model_config_to_json(model.config());
    manifest["step"] = extras.step;
    manifest["seed"] = extras.seed;
    manifest["rng_state"] = extras.rng_state;
    manifest["has_ema"] = extras.ema != nullptr;
    manifest["has_optimizer"] = extras.optimizer != nullptr;
    if (extras.context) manifest["context_config"] = context_config_to_json(extras.context->config());
    if (extras.optimizer) manifest["optimizer_step"] = extras.optimizer->step_count();

    write_store(dir + "/params", model.params());
    if (extras.context) write_store(dir + "/context", extras.context->params());
    auto write_ema = [&](const Ema* ema, const ParamStore& params, const std::string& sub) {
        if (!ema) return;
        fs::create_directories(dir + "/" + sub);
        for (size_t i = 0; i < params.items().size(); ++i) {
            const std::string& name = params.items()[i].first;
            write_tensor_blob(dir + "/" + sub + "/" + name + ".bin", name, ema->shadow()[i]);
        }
    };
    write_ema(extras.ema, model.params(), "ema");
    if (extras.context) write_ema(extras.context_ema, extras.context->params(), "ema_context");
    auto write_opt = [&](const AdamW* opt, const ParamStore& params, const std::string& sub) {
        if (!opt) return;
        fs::create_directories(dir + "/" + sub);
        for (size_t i = 0; i < params.items().size(); ++i) {
            const std::string& name = params.items()[i].first;
            write_tensor_blob(dir + "/" + sub + "/" + name + ".m.bin", name, opt->slots()[i].m);
            write_tensor_blob(dir + "/" + sub + "/" + name + ".v.bin", name, opt->slots()[i].v);
        }
    };
    write_opt(extras.optimizer, model.params(), "opt");
    if (extras.context) write_opt(extras.context_optimizer, extras.context->params(), "opt_context");

    std::ofstream mf(dir + "/manifest.json");
    mf << manifest.dump(2) << "\n";
    if (!mf) throw std::runtime_error("failed to write checkpoint manifest in " + dir);
}

LoadedCheckpoint read_checkpoint_manifest(const std::string& dir) {
    Json manifest = load_json_file(dir + "/manifest.json");
    LoadedCheckpoint out;
    out.config = model_config_from_json(manifest.at("config"));
    if (manifest.contains("context_config"))
        out.context_config = context_config_from_json(manifest["context_config"]);
    out.step = manifest.value("step", 0);
    out.seed = manifest.value("seed", uint64_t(0));
    out.rng_state = manifest.value("rng_state", std::string());
    out.has_ema = manifest.value("has_ema", false);
    out.has_optimizer = manifest.value("has_optimizer", false);
    return out;
}

void load_params(const std::string& dir, const std::string& subdir, ParamStore& params) {
    for (const auto& [name, v] : params.items()) {
        const std::string path = dir + "/" + subdir + "/" + name + ".bin";
        NamedTensor nt = read_tensor_blob(path);
        if (nt.tensor.shape() != v->value.shape())
            throw std::runtime_error("checkpoint shape mismatch for " + name + ": stored " +
                                     shape_str(nt.tensor.shape()) + " vs model " +
                                     shape_str(v->value.shape()));
        if (nt.tensor.dtype() != v->value.dtype())
            v->value.copy_from(nt.tensor.astype(v->value.dtype()));
        else
            v->value.copy_from(nt.tensor);
    }
}

void load_optimizer(const std::string& dir, const std::string& subdir, AdamW& opt,
                    const ParamStore& params) {
    for (size_t i = 0; i < params.items().size(); ++i) {
        const std::string& name = params.items()[i].first;
        opt.slots()[i].m.copy_from(read_tensor_blob(dir + "/" + subdir + "/" + name + ".m.bin").tensor);
        opt.slots()[i].v.copy_from(read_tensor_blob(dir + "/" + subdir + "/" + name + ".v.bin").tensor);
    }
    Json manifest = load_json_file(dir + "/manifest.json");
    opt.set_step_count(manifest.value("optimizer_step", int64_t(0)));
}

void load_ema(const std::string& dir, const std::string& subdir, Ema& ema, const ParamStore& params) {
    for (size_t i = 0; i < params.items().size(); ++i) {
        const std::string& name = params.items()[i].first;
        ema.shadow()[i].copy_from(read_tensor_blob(dir + "/" + subdir + "/" + name + ".bin").tensor);
    }
}

}  // namespace p3d
