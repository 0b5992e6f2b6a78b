#include "akd/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "akd/errors.hpp"

namespace akd {

namespace fs = std::filesystem;

Precision precision_from_string(const std::string& s) {
    if (s == "f32") return Precision::f32;
    if (s == "f64") return Precision::f64;
    throw ConfigError("unknown precision '" + s + "'");
}

Stage stage_from_string(const std::string& s) {
    if (s == "pretrain") return Stage::pretrain;
    if (s == "finetune") return Stage::finetune;
    throw ConfigError("unknown stage '" + s + "'");
}

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (accumulation_steps == 0) throw ConfigError("accumulation_steps must be >= 1");
    if (warmup_frac < 0.0 || warmup_frac > 0.5) {
        throw ConfigError("warmup fraction must lie in [0, 0.5]");
    }
    if (losses.lambda < 0.0) throw NegativeLambda("lambda must be >= 0");
    if (losses.k == 0) throw ConfigError("k must be >= 1");
}

template <class T>
DistillTrainerT<T>::DistillTrainerT(VlmT<T> student, std::optional<VlmT<T>> teacher,
                                    std::optional<VlmConfig> teacher_cfg, const TrainConfig& cfg)
    : cfg_(cfg), student_(std::move(student)), teacher_(std::move(teacher)),
      teacher_cfg_(std::move(teacher_cfg)),
      opt_(0.9, 0.999, 1e-8, cfg.weight_decay) {
    cfg_.validate();
    const auto& scfg = student_.config();
    if (cfg_.losses.k > scfg.n_vision_tokens) {
        throw ConfigError("k exceeds n_vision_tokens");
    }
    if (cfg_.losses.any_kd()) {
        if (teacher_ && !teacher_cfg_) teacher_cfg_ = teacher_->config();
        if (!teacher_cfg_) {
            throw ConfigError("KD losses enabled but no teacher model or config given");
        }
        if (teacher_cfg_->n_vision_tokens != scfg.n_vision_tokens ||
            teacher_cfg_->vocab_size != scfg.vocab_size) {
            throw ConfigError("teacher and student must share vocab and vision token count");
        }
        Rng prng(cfg_.seed ^ 0x50524F4Aull);
        p_attn_ = HeadProjectorT<T>::init(scfg.n_heads, teacher_cfg_->n_heads, prng);
        p_v_ = EmbedProjectorT<T>::init(scfg.d_model, teacher_cfg_->d_model, prng);
    }

    for (auto& [name, t] : student_.trainable_params()) {
        const bool proj = name.rfind("vproj.", 0) == 0;
        opt_.add(name, t, proj ? ParamGroup::projector : ParamGroup::other);
    }
    if (p_attn_) {
        for (auto& [name, t] : p_attn_->params()) opt_.add(name, t, ParamGroup::projector);
    }
    if (p_v_) {
        for (auto& [name, t] : p_v_->params()) opt_.add(name, t, ParamGroup::projector);
    }
}

template <class T>
TeacherSignalsT<T> DistillTrainerT<T>::teacher_signals(const Sample& sample,
                                                       const std::vector<int>& text_ids) {
    if (use_cache_) {
        auto it = cache_.find(sample_hash(sample));
        if (it == cache_.end()) throw IoError("sample missing from teacher cache");
        return it->second;
    }
    if (!teacher_) throw ConfigError("KD losses enabled but no teacher resident");
    NoGradGuard ng;
    auto trace = teacher_->run(sample.image, text_ids, cfg_.losses.needs_last_attention());
    return TeacherSignalsT<T>::from_trace(trace);
}

template <class T>
LossReport DistillTrainerT<T>::micro_step(const DistillBatch& batch) {
    if (batch.size() == 0) throw EmptyDataset("empty micro-batch");
    const bool kd = cfg_.losses.any_kd();
    const bool need_last = cfg_.losses.needs_last_attention();

    TensorT<T> batch_total;
    LossReport acc;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Sample sample;
        sample.image = batch.images[i];
        sample.prompt_ids = batch.prompt_ids[i];
        sample.response_ids = batch.response_ids[i];
        auto tf = teacher_forcing(sample.prompt_ids, sample.response_ids);

        std::optional<TeacherSignalsT<T>> sig;
        if (kd) sig = teacher_signals(sample, tf.text_ids);

        auto strace = student_.run(sample.image, tf.text_ids, need_last);
        TotalLossT<T> out;
        try {
            out = build_align_losses<T>(strace, sig ? &*sig : nullptr,
                                        p_attn_ ? &*p_attn_ : nullptr,
                                        p_v_ ? &*p_v_ : nullptr, tf.targets, tf.mask,
                                        cfg_.losses);
        } catch (const NonFiniteComponent& e) {
            throw NonFiniteLoss(e.what());
        }
        batch_total = i == 0 ? out.total : add(batch_total, out.total);
        acc.l_sup += out.report.l_sup;
        acc.l_attn_tv += out.report.l_attn_tv;
        acc.l_v_focus += out.report.l_v_focus;
        acc.l_v_all += out.report.l_v_all;
        acc.l_v += out.report.l_v;
        acc.l_rkld += out.report.l_rkld;
        acc.total += out.report.total;
        if (i == 0) acc.focus_indices = out.report.focus_indices;
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    acc.l_sup *= inv;
    acc.l_attn_tv *= inv;
    acc.l_v_focus *= inv;
    acc.l_v_all *= inv;
    acc.l_v *= inv;
    acc.l_rkld *= inv;
    acc.total *= inv;
    if (!std::isfinite(acc.total)) throw NonFiniteLoss("non-finite batch total");

    // Scaled so accumulated micro-gradients equal the combined-batch mean.
    backward(scale(batch_total, inv / static_cast<double>(cfg_.accumulation_steps)));

    ++micro_count_;
    if (micro_count_ % cfg_.accumulation_steps == 0) {
        const std::size_t t = opt_.step_count() + 1;  // 1-based schedule index
        const double lr_p = cosine_lr(std::min(t, cfg_.steps), cfg_.lr_projector_max,
                                      cfg_.steps, cfg_.warmup_steps());
        const double lr_o = cosine_lr(std::min(t, cfg_.steps), cfg_.lr_backbone_max(),
                                      cfg_.steps, cfg_.warmup_steps());
        opt_.step(lr_p, lr_o);
        opt_.zero_grad();
    }
    return acc;
}

template <class T>
void DistillTrainerT<T>::train(const std::vector<Sample>& samples, const std::string& out_dir) {
    if (samples.empty()) throw EmptyDataset("train on empty dataset");
    fs::create_directories(out_dir);

    std::ofstream metrics(out_dir + "/metrics.csv", std::ios::trunc);
    if (!metrics) throw IoError("cannot open metrics log");
    metrics << "# seed=" << cfg_.seed << "\n";
    metrics << "step,lr,l_sup,l_attn_tv,l_v_focus,l_v_all,l_v,l_rkld,total\n";
    auto num = [](double v) {
        char out[40];
        std::snprintf(out, sizeof(out), "%.17g", v);
        return std::string(out);
    };

    // Batch index is a pure function of the global micro counter, so resumed
    // runs replay the identical stream.
    std::vector<DistillBatch> epoch_batches;
    std::uint64_t loaded_epoch = ~0ull;
    const std::size_t per_epoch =
        (samples.size() + cfg_.batch_size - 1) / cfg_.batch_size;

    for (std::size_t step = opt_.step_count(); step < cfg_.steps; ++step) {
        LossReport step_report;
        for (std::size_t micro = 0; micro < cfg_.accumulation_steps; ++micro) {
            const std::uint64_t gbi =
                static_cast<std::uint64_t>(step) * cfg_.accumulation_steps + micro;
            const std::uint64_t epoch = gbi / per_epoch;
            if (epoch != loaded_epoch) {
                epoch_batches = make_batches(samples, cfg_.batch_size, cfg_.seed, epoch);
                loaded_epoch = epoch;
            }
            auto r = micro_step(epoch_batches[gbi % per_epoch]);
            step_report.l_sup += r.l_sup;
            step_report.l_attn_tv += r.l_attn_tv;
            step_report.l_v_focus += r.l_v_focus;
            step_report.l_v_all += r.l_v_all;
            step_report.l_v += r.l_v;
            step_report.l_rkld += r.l_rkld;
            step_report.total += r.total;
        }
        const double inv = 1.0 / static_cast<double>(cfg_.accumulation_steps);
        metrics << (step + 1) << "," << num(opt_.last_lr(ParamGroup::other)) << ","
                << num(step_report.l_sup * inv) << "," << num(step_report.l_attn_tv * inv)
                << "," << num(step_report.l_v_focus * inv) << ","
                << num(step_report.l_v_all * inv) << "," << num(step_report.l_v * inv) << ","
                << num(step_report.l_rkld * inv) << "," << num(step_report.total * inv)
                << "\n";
        if (cfg_.checkpoint_every > 0 && (step + 1) % cfg_.checkpoint_every == 0 &&
            step + 1 < cfg_.steps) {
            write_checkpoint_file(out_dir + "/ckpt_" + std::to_string(step + 1) + ".akd",
                                  checkpoint());
        }
    }
    metrics.flush();
    if (!metrics) throw IoError("metrics log write failed");
    write_checkpoint_file(out_dir + "/ckpt_final.akd", checkpoint());
}

template <class T>
void DistillTrainerT<T>::build_teacher_cache(const std::vector<Sample>& samples,
                                             const std::string& dir) {
    if (!teacher_) throw ConfigError("cannot build a teacher cache without a teacher");
    fs::create_directories(dir);
    NoGradGuard ng;
    for (const auto& sample : samples) {
        const std::uint64_t h = sample_hash(sample);
        char name[32];
        std::snprintf(name, sizeof(name), "%016llx.trace", static_cast<unsigned long long>(h));
        const std::string path = dir + "/" + name;
        if (fs::exists(path)) continue;
        auto tf = teacher_forcing(sample.prompt_ids, sample.response_ids);
        auto trace = teacher_->run(sample.image, tf.text_ids, false);
        auto sig = TeacherSignalsT<T>::from_trace(trace);
        Archive a;
        a.header["kind"] = "teacher_trace";
        a.header["hash"] = std::string(name, 16);
        a.tensors.emplace_back("a_tv", to_blob(sig.a_tv));
        a.tensors.emplace_back("vision_emb", to_blob(sig.vision_emb));
        a.tensors.emplace_back("text_logits", to_blob(sig.text_logits));
        write_checkpoint_file(path, a);
    }
}

template <class T>
void DistillTrainerT<T>::load_teacher_cache(const std::string& dir,
                                            const std::vector<Sample>& samples) {
    if (cfg_.losses.enable_attn_tv && cfg_.losses.attn_block != AttnBlock::tv) {
        throw ConfigError("teacher cache only supports attn_block=tv");
    }
    cache_.clear();
    for (const auto& sample : samples) {
        const std::uint64_t h = sample_hash(sample);
        char name[32];
        std::snprintf(name, sizeof(name), "%016llx.trace", static_cast<unsigned long long>(h));
        Archive a = read_archive(dir + "/" + name);
        TeacherSignalsT<T> sig;
        const TensorBlob* atv = a.find("a_tv");
        const TensorBlob* ve = a.find("vision_emb");
        const TensorBlob* tl = a.find("text_logits");
        if (!atv || !ve || !tl) throw ParseError("trace file missing tensors");
        sig.a_tv = from_blob<T>(*atv);
        sig.vision_emb = from_blob<T>(*ve);
        sig.text_logits = from_blob<T>(*tl);
        cache_.emplace(h, std::move(sig));
    }
    use_cache_ = true;
}

template <class T>
Archive DistillTrainerT<T>::checkpoint() const {
    auto* self = const_cast<DistillTrainerT<T>*>(this);
    return session_checkpoint<T>(self->student_, p_attn_ ? &*self->p_attn_ : nullptr,
                                 p_v_ ? &*self->p_v_ : nullptr, opt_, opt_.step_count());
}

template <class T>
void DistillTrainerT<T>::restore(const Archive& archive) {
    student_ = VlmT<T>::from_archive(archive);
    auto load_pair = [&](TensorT<T>& t, const std::string& name) {
        const TensorBlob* blob = archive.find(name);
        if (!blob) throw ParseError("checkpoint missing tensor '" + name + "'");
        if (blob->shape != t.shape()) throw ShapeMismatch("bad shape for '" + name + "'");
        auto dst = t.data_mut();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(blob->values[i]);
    };
    if (p_attn_) {
        load_pair(p_attn_->weight, "p_attn.w");
        load_pair(p_attn_->bias, "p_attn.b");
    }
    if (p_v_) {
        load_pair(p_v_->weight, "p_v.w");
        load_pair(p_v_->bias, "p_v.b");
    }
    // Rebuild optimizer bindings against the restored student tensors.
    opt_ = AdamWT<T>(0.9, 0.999, 1e-8, cfg_.weight_decay);
    for (auto& [name, t] : student_.trainable_params()) {
        const bool proj = name.rfind("vproj.", 0) == 0;
        opt_.add(name, t, proj ? ParamGroup::projector : ParamGroup::other);
    }
    if (p_attn_) {
        for (auto& [name, t] : p_attn_->params()) opt_.add(name, t, ParamGroup::projector);
    }
    if (p_v_) {
        for (auto& [name, t] : p_v_->params()) opt_.add(name, t, ParamGroup::projector);
    }
    opt_.load_state(archive);
}

template <class T>
EvalResult evaluate(const VlmT<T>& model, const std::vector<Sample>& samples) {
    if (samples.empty()) throw EmptyDataset("evaluate on empty dataset");
    NoGradGuard ng;
    double ce_sum = 0.0;
    std::size_t ce_count = 0;
    std::size_t matches = 0;
    for (const auto& sample : samples) {
        auto tf = teacher_forcing(sample.prompt_ids, sample.response_ids);
        auto trace = model.run(sample.image, tf.text_ids, false);
        auto text_logits =
            slice_rows(trace.logits, trace.n_vision, trace.total_len());
        std::size_t active = 0;
        for (auto m : tf.mask) active += m;
        ce_sum += static_cast<double>(
                      cross_entropy_masked(text_logits, tf.targets, tf.mask).item()) *
                  static_cast<double>(active);
        ce_count += active;

        auto generated = model.generate_greedy(sample.image, sample.prompt_ids,
                                               sample.response_ids.size(), tokens::kEos);
        if (generated == sample.response_ids) ++matches;
    }
    EvalResult r;
    r.cross_entropy = ce_sum / static_cast<double>(ce_count);
    r.exact_match = static_cast<double>(matches) / static_cast<double>(samples.size());
    return r;
}

template <class T>
Archive session_checkpoint(const VlmT<T>& student, const HeadProjectorT<T>* p_attn,
                           const EmbedProjectorT<T>* p_v, const AdamWT<T>& opt,
                           std::size_t step) {
    Archive a = student.to_archive();
    a.header["step"] = std::to_string(step);
    if (p_attn) {
        a.tensors.emplace_back("p_attn.w", to_blob(p_attn->weight));
        a.tensors.emplace_back("p_attn.b", to_blob(p_attn->bias));
    }
    if (p_v) {
        a.tensors.emplace_back("p_v.w", to_blob(p_v->weight));
        a.tensors.emplace_back("p_v.b", to_blob(p_v->bias));
    }
    opt.append_state(a);
    return a;
}

void write_checkpoint_file(const std::string& path, const Archive& archive) {
    const std::string tmp = path + ".tmp";
    try {
        write_archive(tmp, archive);
        fs::rename(tmp, path);
    } catch (...) {
        std::error_code ec;
        fs::remove(tmp, ec);
        throw;
    }
}

#define AKD_INSTANTIATE_TRAINER(T)                                                      \
    template class DistillTrainerT<T>;                                                  \
    template EvalResult evaluate(const VlmT<T>&, const std::vector<Sample>&);           \
    template Archive session_checkpoint(const VlmT<T>&, const HeadProjectorT<T>*,       \
                                        const EmbedProjectorT<T>*, const AdamWT<T>&,    \
                                        std::size_t)

AKD_INSTANTIATE_TRAINER(float);
AKD_INSTANTIATE_TRAINER(double);

#undef AKD_INSTANTIATE_TRAINER

}  // namespace akd
