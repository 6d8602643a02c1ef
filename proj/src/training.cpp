#include "p3d/training.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "p3d/blob.hpp"
#include "p3d/checkpoint.hpp"

namespace p3d {

// ---- flow matching -------------------------------------------------------------

Var fm_sample_xt(const Var& u_out, const Var& eps, double t, double sigma_min) {
    if (t < 0.0 || t > 1.0) throw std::runtime_error("fm_sample_xt: t must be in [0,1]");
    return add(mul_scalar(u_out, t), mul_scalar(eps, 1.0 - (1.0 - sigma_min) * t));
}

FlowState fm_sample_state(const Tensor& u_out, const Tensor& eps, double t, double sigma_min) {
    FlowState fs;
    fs.t = t;
    fs.sigma_min = sigma_min;
    fs.eps = eps;
    fs.x_t = u_out.clone();
    fs.x_t.scale_(t);
    fs.x_t.add_scaled_(eps, 1.0 - (1.0 - sigma_min) * t);
    return fs;
}

Var fm_target(const Var& u_out, const Var& eps, double sigma_min) {
    return sub(u_out, mul_scalar(eps, 1.0 - sigma_min));
}

Var fm_loss(const Var& model_out, const Var& u_out, const Var& eps, double sigma_min) {
    return mse_loss(model_out, fm_target(u_out, eps, sigma_min));
}

Tensor euler_sample(const std::function<Tensor(const Tensor&, double)>& velocity, const Shape& shape,
                    int steps, Rng& rng, DType dtype) {
    if (steps < 1) throw std::runtime_error("euler_sample: steps must be >= 1");
    NoGradGuard ng;
    Tensor x(shape, dtype);
    for (int64_t i = 0; i < x.numel(); ++i) x.set(i, rng.normal());
    const double dt = 1.0 / static_cast<double>(steps);
    for (int k = 0; k < steps; ++k) {
        const double t = static_cast<double>(k) * dt;
        Tensor v = velocity(x, t);
        if (v.shape() != x.shape()) throw std::runtime_error("euler_sample: velocity shape mismatch");
        x.add_scaled_(v, dt);
    }
    return x;
}

// ---- crop sampling -------------------------------------------------------------

CropPair crop_sample(const Tensor& s_t, const Tensor& s_next, int64_t size, Rng& rng) {
    const Shape& s = s_t.shape();
    if (s.size() != 4) throw std::runtime_error("crop_sample: fields must be [C,X,Y,Z]");
    if (s_next.shape() != s) throw std::runtime_error("crop_sample: state shapes differ");
    for (int a = 1; a < 4; ++a)
        if (size > s[a])
            throw std::runtime_error("crop_sample: size " + std::to_string(size) +
                                     " exceeds extent " + std::to_string(s[a]));
    CropPair out;
    for (int a = 0; a < 3; ++a) out.offset[a] = rng.uniform_int(0, s[1 + a] - size);

    const int64_t C = s[0], X = s[1], Y = s[2], Z = s[3];
    auto do_crop = [&](const Tensor& src) {
        Tensor dst({C, size, size, size}, src.dtype());
        for (int64_t c = 0; c < C; ++c)
            for (int64_t x = 0; x < size; ++x)
                for (int64_t y = 0; y < size; ++y)
                    for (int64_t z = 0; z < size; ++z)
                        dst.set(((c * size + x) * size + y) * size + z,
                                src.at(((c * X + out.offset[0] + x) * Y + out.offset[1] + y) * Z +
                                       out.offset[2] + z));
        return dst;
    };
    out.in = do_crop(s_t);
    out.out = do_crop(s_next);
    return out;
}

// ---- optimizer ------------------------------------------------------------------

AdamW::AdamW(const ParamStore& params, AdamWConfig cfg) : cfg_(cfg) {
    for (const auto& [name, v] : params.items())
        slots_.push_back({Tensor::zeros(v->value.shape(), v->value.dtype()),
                          Tensor::zeros(v->value.shape(), v->value.dtype())});
}

void AdamW::step(ParamStore& params) {
    if (slots_.size() != params.size()) throw std::runtime_error("AdamW: parameter count changed");
    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (size_t i = 0; i < slots_.size(); ++i) {
        Var& p = const_cast<Var&>(params.items()[i].second);
        if (!p->requires_grad || !p->has_grad) continue;
        Tensor& m = slots_[i].m;
        Tensor& v = slots_[i].v;
        const int64_t n = p->value.numel();
        for (int64_t j = 0; j < n; ++j) {
            const double g = p->grad.at(j);
            const double mj = cfg_.beta1 * m.at(j) + (1.0 - cfg_.beta1) * g;
            const double vj = cfg_.beta2 * v.at(j) + (1.0 - cfg_.beta2) * g * g;
            m.set(j, mj);
            v.set(j, vj);
            const double mhat = mj / bc1;
            const double vhat = vj / bc2;
            const double w = p->value.at(j);
            p->value.set(j, w - cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w));
        }
    }
}

// ---- EMA -----------------------------------------------------------------------------

Ema::Ema(const ParamStore& params, double decay) : decay_(decay) {
    for (const auto& [name, v] : params.items()) shadow_.push_back(v->value.clone());
}

void Ema::update(const ParamStore& params) {
    if (shadow_.size() != params.size()) throw std::runtime_error("Ema: parameter count changed");
    for (size_t i = 0; i < shadow_.size(); ++i) {
        Tensor& s = shadow_[i];
        const Tensor& w = params.items()[i].second->value;
        s.scale_(decay_);
        s.add_scaled_(w, 1.0 - decay_);
    }
}

void Ema::copy_to(ParamStore& params) const {
    for (size_t i = 0; i < shadow_.size(); ++i)
        const_cast<Var&>(params.items()[i].second)->value.copy_from(shadow_[i]);
}

// ---- gradient scoping ------------------------------------------------------------------

TrainSetup::Mode train_mode_from_name(const std::string& s) {
    if (s == "full_domain") return TrainSetup::Mode::FullDomain;
    if (s == "crops") return TrainSetup::Mode::Crops;
    if (s == "context_full") return TrainSetup::Mode::ContextFull;
    if (s == "context_partial") return TrainSetup::Mode::ContextPartial;
    if (s == "context_frozen_encoder") return TrainSetup::Mode::ContextFrozenEncoder;
    throw std::runtime_error("unknown train mode: " + s);
}

GradScope draw_grad_scope(const TrainSetup& setup, int64_t n_regions, int64_t n_decoder_blocks, Rng& rng) {
    GradScope sc;
    switch (setup.mode) {
        case TrainSetup::Mode::FullDomain:
        case TrainSetup::Mode::Crops:
        case TrainSetup::Mode::ContextFull:
            break;  // everything enabled
        case TrainSetup::Mode::ContextPartial:
            sc.encoder_crops.resize(n_regions);
            for (int64_t r = 0; r < n_regions; ++r) sc.encoder_crops[r] = rng.bernoulli(setup.p_enc);
            sc.decoder_blocks.resize(n_decoder_blocks);
            for (int64_t b = 0; b < n_decoder_blocks; ++b) sc.decoder_blocks[b] = rng.bernoulli(setup.p_dec);
            break;
        case TrainSetup::Mode::ContextFrozenEncoder:
            sc.encoder_params = false;
            sc.encoder_crops.assign(n_regions, false);
            sc.decoder_blocks.resize(n_decoder_blocks);
            for (int64_t b = 0; b < n_decoder_blocks; ++b) sc.decoder_blocks[b] = rng.bernoulli(setup.p_dec);
            break;
    }
    return sc;
}

ParamFreeze::ParamFreeze(ParamStore& params, const std::vector<std::string>& prefixes) {
    for (const auto& [name, v] : params.items()) {
        if (!v->requires_grad) continue;
        for (const auto& p : prefixes) {
            if (name.rfind(p, 0) == 0) {
                v->requires_grad = false;
                frozen_.push_back(v);
                break;
            }
        }
    }
}

ParamFreeze::~ParamFreeze() {
    for (auto& v : frozen_) v->requires_grad = true;
}

std::vector<std::string> decoder_block_prefixes(const ModelConfig& cfg) {
    std::vector<std::string> out;
    for (int lvl = cfg.conv_downs() - 1; lvl >= 0; --lvl) {
        out.push_back("dec.lvl" + std::to_string(lvl) + ".block0");
        out.push_back("dec.lvl" + std::to_string(lvl) + ".block1");
    }
    return out;
}

double global_grad_norm(const ParamStore& params) {
    double acc = 0.0;
    for (const auto& [name, v] : params.items()) {
        if (!v->has_grad) continue;
        for (int64_t i = 0; i < v->grad.numel(); ++i) {
            const double g = v->grad.at(i);
            acc += g * g;
        }
    }
    return std::sqrt(acc);
}

// ---- training loop -------------------------------------------------------------------

namespace {

Tensor stack_batch(const std::vector<Tensor>& items) {
    if (items.empty()) throw std::runtime_error("stack_batch: empty");
    Shape s = items[0].shape();
    Shape out_shape = s;
    out_shape.insert(out_shape.begin(), static_cast<int64_t>(items.size()));
    Tensor out(out_shape, items[0].dtype());
    const int64_t n = items[0].numel();
    for (size_t b = 0; b < items.size(); ++b) {
        if (items[b].shape() != s) throw std::runtime_error("stack_batch: ragged shapes");
        for (int64_t i = 0; i < n; ++i) out.set(static_cast<int64_t>(b) * n + i, items[b].at(i));
    }
    return out;
}

Tensor randn_like_shape(const Shape& s, DType dt, Rng& rng) {
    Tensor t(s, dt);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal());
    return t;
}

bool is_context_mode(TrainSetup::Mode m) {
    return m == TrainSetup::Mode::ContextFull || m == TrainSetup::Mode::ContextPartial ||
           m == TrainSetup::Mode::ContextFrozenEncoder;
}

/// Load or compute the frozen-encoder states for one sample, caching on disk
/// keyed by (backbone hash, sample id, region).
std::vector<BackboneState> frozen_region_states(const P3DModel& model, const Var& u, const Var& e,
                                                const RegionLayout& layout, const std::string& cache_dir,
                                                uint64_t params_hash, int64_t sample_id) {
    const int64_t R = layout.num_regions();
    std::vector<BackboneState> states(R);
    const bool cacheable = !cache_dir.empty() && sample_id >= 0;
    for (int64_t r = 0; r < R; ++r) {
        std::string base;
        if (cacheable) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%016llx_s%lld_r%lld",
                          static_cast<unsigned long long>(params_hash),
                          static_cast<long long>(sample_id), static_cast<long long>(r));
            base = cache_dir + "/" + buf;
        }
        bool loaded = false;
        if (cacheable && std::filesystem::exists(base + ".tokens.bin")) {
            BackboneState st;
            st.tokens = make_leaf(read_tensor_blob(base + ".tokens.bin").tensor, false);
            const auto tpr = layout.tokens_per_region();
            st.grid = tpr;
            for (int lvl = 0;; ++lvl) {
                const std::string rp = base + ".res" + std::to_string(lvl) + ".bin";
                if (!std::filesystem::exists(rp)) break;
                st.residuals.push_back(make_leaf(read_tensor_blob(rp).tensor, false));
            }
            states[r] = std::move(st);
            loaded = true;
        }
        if (!loaded) {
            NoGradGuard ng;
            BackboneState st = encode_region(model, u, layout, r, e);
            if (cacheable) {
                std::filesystem::create_directories(cache_dir);
                write_tensor_blob(base + ".tokens.bin", "tokens", st.tokens->value);
                for (size_t lvl = 0; lvl < st.residuals.size(); ++lvl)
                    write_tensor_blob(base + ".res" + std::to_string(lvl) + ".bin",
                                      "res" + std::to_string(lvl), st.residuals[lvl]->value);
            }
            states[r] = std::move(st);
        }
    }
    return states;
}

}  // namespace

TrainResult train_loop(P3DModel& model, ContextModel* ctx, PairSampler& data, const TrainLoopConfig& cfg) {
    const TrainSetup& setup = cfg.setup;
    const ModelConfig& mc = model.config();
    const bool context_mode = is_context_mode(setup.mode);
    if (context_mode && !ctx && setup.mode != TrainSetup::Mode::Crops)
        throw std::runtime_error("train_loop: context mode requires a context model");
    if (setup.precompute_latents &&
        (setup.mode != TrainSetup::Mode::ContextFrozenEncoder ||
         setup.objective != TrainSetup::Objective::Supervised))
        throw std::runtime_error(
            "train_loop: latent precomputation requires context_frozen_encoder + supervised "
            "(diffusion inputs change every step)");

    Rng rng(cfg.seed);
    if (!cfg.resume_rng_state.empty()) rng.deserialize(cfg.resume_rng_state);

    AdamWConfig ocfg;
    ocfg.lr = setup.lr;
    ocfg.weight_decay = setup.weight_decay;
    AdamW opt(model.params(), ocfg);
    std::unique_ptr<AdamW> ctx_opt;
    Ema ema(model.params(), setup.ema_decay);
    std::unique_ptr<Ema> ctx_ema;
    if (ctx) {
        ctx_opt = std::make_unique<AdamW>(ctx->params(), ocfg);
        ctx_ema = std::make_unique<Ema>(ctx->params(), setup.ema_decay);
    }
    if (cfg.resume_step > 0 && !cfg.out_dir.empty()) {
        const std::string ck = cfg.out_dir + "/ckpt";
        load_optimizer(ck, "opt", opt, model.params());
        load_ema(ck, "ema", ema, model.params());
        opt.set_step_count(cfg.resume_step);
        if (ctx) {
            load_optimizer(ck, "opt_context", *ctx_opt, ctx->params());
            load_ema(ck, "ema_context", *ctx_ema, ctx->params());
            ctx_opt->set_step_count(cfg.resume_step);
        }
    }

    const auto dec_prefixes = decoder_block_prefixes(mc);
    const int64_t n_regions = context_mode ? cfg.layout.num_regions() : 0;
    const uint64_t frozen_hash = model.params().content_hash();
    const std::string cache_dir = setup.precompute_latents
                                      ? (cfg.latent_cache_dir.empty() ? cfg.out_dir + "/latent_cache"
                                                                      : cfg.latent_cache_dir)
                                      : std::string();

    std::ofstream log_csv;
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        const bool fresh = cfg.resume_step == 0;
        log_csv.open(cfg.out_dir + "/loss.csv", fresh ? std::ios::trunc : std::ios::app);
        if (fresh) log_csv << "step,loss,lr,grad_norm\n";
    }

    auto save_ckpt = [&](int64_t step) {
        if (cfg.out_dir.empty()) return;
        CheckpointExtras ex;
        ex.context = ctx;
        ex.optimizer = &opt;
        ex.context_optimizer = ctx_opt.get();
        ex.ema = &ema;
        ex.context_ema = ctx_ema.get();
        ex.step = step;
        ex.seed = cfg.seed;
        ex.rng_state = rng.serialize();
        save_checkpoint(cfg.out_dir + "/ckpt", model, ex);
    };

    TrainResult result;
    for (int64_t step = cfg.resume_step; step < setup.steps; ++step) {
        // Assemble the batch. All RNG draws happen in a fixed order per step.
        std::vector<Tensor> ins, outs;
        std::vector<Conditioning> conds;
        std::vector<int64_t> sample_ids;
        std::vector<double> ts;
        std::vector<Tensor> epses;
        for (int64_t b = 0; b < setup.batch; ++b) {
            SamplePair sp = data.sample(rng);
            if (setup.mode == TrainSetup::Mode::Crops && setup.crop > 0 && !sp.in.empty()) {
                CropPair cp = crop_sample(sp.in, sp.out, setup.crop, rng);
                sp.in = std::move(cp.in);
                sp.out = std::move(cp.out);
            }
            if (setup.objective == TrainSetup::Objective::FlowMatching) {
                const double t = rng.uniform();
                Tensor eps = randn_like_shape(sp.out.shape(), sp.out.dtype(), rng);
                sp.cond.t = t;
                ts.push_back(t);
                epses.push_back(std::move(eps));
            }
            conds.push_back(sp.cond);
            sample_ids.push_back(sp.id);
            ins.push_back(std::move(sp.in));
            outs.push_back(std::move(sp.out));
        }

        Var target;
        Var input;
        if (setup.objective == TrainSetup::Objective::FlowMatching) {
            std::vector<Tensor> xts, targets, model_ins;
            for (int64_t b = 0; b < setup.batch; ++b) {
                FlowState fs = fm_sample_state(outs[b], epses[b], ts[b], setup.sigma_min);
                Tensor tgt = outs[b].clone();
                tgt.add_scaled_(epses[b], -(1.0 - setup.sigma_min));
                targets.push_back(std::move(tgt));
                if (ins[b].empty()) {
                    model_ins.push_back(std::move(fs.x_t));
                } else {
                    // channel concat [u_in, x_t]
                    Shape s = ins[b].shape();
                    Shape xs = fs.x_t.shape();
                    Shape cat = s;
                    cat[0] = s[0] + xs[0];
                    Tensor m(cat, ins[b].dtype());
                    for (int64_t i = 0; i < ins[b].numel(); ++i) m.set(i, ins[b].at(i));
                    for (int64_t i = 0; i < fs.x_t.numel(); ++i) m.set(ins[b].numel() + i, fs.x_t.at(i));
                    model_ins.push_back(std::move(m));
                }
            }
            input = make_leaf(stack_batch(model_ins), false);
            target = make_leaf(stack_batch(targets), false);
        } else {
            input = make_leaf(stack_batch(ins), false);
            target = make_leaf(stack_batch(outs), false);
        }

        GradScope scope = draw_grad_scope(setup, n_regions, static_cast<int64_t>(dec_prefixes.size()), rng);
        std::vector<std::string> freeze_list;
        if (!scope.encoder_params) {
            freeze_list.push_back("enc.");
            freeze_list.push_back("tblock");
        }
        for (size_t i = 0; i < scope.decoder_blocks.size(); ++i)
            if (!scope.decoder_blocks[i]) freeze_list.push_back(dec_prefixes[i]);
        ParamFreeze freeze(model.params(), freeze_list);

        Var e = model.embed_conditioning(conds);
        Var pred;
        if (context_mode) {
            AssembledForwardOptions opts;
            opts.use_context = ctx != nullptr;
            opts.encoder_grad = scope.encoder_crops;
            if (setup.mode == TrainSetup::Mode::ContextFrozenEncoder && setup.precompute_latents &&
                setup.batch == 1) {
                opts.precomputed = frozen_region_states(model, input, e, cfg.layout, cache_dir,
                                                        frozen_hash, sample_ids[0]);
            }
            pred = assembled_forward(model, ctx, input, cfg.layout, e, opts);
        } else {
            pred = model.forward_with_embedding(input, e);
        }
        Var loss = mse_loss(pred, target);
        const double loss_val = loss->value.at(0);
        if (!std::isfinite(loss_val)) {
            if (!cfg.out_dir.empty()) {
                std::ofstream diag(cfg.out_dir + "/nan_diag.txt");
                diag << "non-finite loss at step " << step << "\nloss=" << loss_val
                     << "\ninput_max_abs=" << input->value.max_abs()
                     << "\ntarget_max_abs=" << target->value.max_abs() << "\n";
            }
            throw std::runtime_error("train_loop: non-finite loss at step " + std::to_string(step));
        }

        model.params().zero_grads();
        if (ctx) ctx->params().zero_grads();
        backward(loss);
        const double gnorm = global_grad_norm(model.params()) +
                             (ctx ? global_grad_norm(ctx->params()) : 0.0);

        opt.step(model.params());
        if (ctx_opt) ctx_opt->step(ctx->params());
        ema.update(model.params());
        if (ctx_ema) ctx_ema->update(ctx->params());

        if (step == cfg.resume_step) result.first_loss = loss_val;
        result.last_loss = loss_val;
        result.losses.push_back(loss_val);
        ++result.steps_run;
        if (log_csv.is_open() &&
            (step % std::max<int64_t>(1, setup.log_every) == 0 || step + 1 == setup.steps))
            log_csv << step << "," << loss_val << "," << setup.lr << "," << gnorm << "\n";
        if (setup.ckpt_every > 0 && (step + 1) % setup.ckpt_every == 0 && step + 1 != setup.steps)
            save_ckpt(step + 1);
    }
    save_ckpt(setup.steps);
    return result;
}

}  // namespace p3d
