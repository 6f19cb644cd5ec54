#include "personalize/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "personalize/errors.hpp"

namespace personalize {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

// Fixed training templates; single-slot prompts describe the subject alone,
// two-slot prompts place a subject in a scene.
const std::vector<std::string>& single_slot_templates() {
    static const std::vector<std::string> t = {
        "a photo of a {}.",
        "a rendering of a {}.",
        "the photo of a {}.",
        "a photo of a clean {}.",
        "a photo of a dirty {}.",
        "a dark photo of the {}.",
        "a photo of the cool {}.",
        "a close-up photo of a {}.",
        "a bright photo of the {}.",
        "a cropped photo of a {}.",
        "a photo of the {}.",
        "a good photo of the {}.",
        "a close-up photo of the {}.",
        "a rendition of the {}.",
        "a photo of a nice {}.",
    };
    return t;
}

const std::vector<std::string>& two_slot_templates() {
    static const std::vector<std::string> t = {
        "a photo of a {} in the {}.",
        "a rendering of a {} in the {}.",
        "a cropped photo of the {} in the {}.",
        "the photo of a {} in the {}.",
        "a photo of a clean {} in the {}.",
        "a photo of my {} in the {}.",
        "a photo of the nice {} in the {}.",
        "a good photo of a {} in the {}.",
        "a rendition of a {} in the {}.",
        "a photo of the clean {} in the {}.",
        "a photo of a cool {} in the {}.",
        "a close-up photo of a {} in the {}.",
        "a photo of the cool {} in the {}.",
        "a cropped photo of a {} in the {}.",
        "a photo of one {} in the {}.",
    };
    return t;
}

std::string to_lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::string token_init_name(TokenInit init) {
    return init == TokenInit::kSupercategoryWord ? "supercategory" : "random";
}

TokenInit token_init_from_name(const std::string& name) {
    if (name == "supercategory") return TokenInit::kSupercategoryWord;
    if (name == "random") return TokenInit::kRandom;
    throw FormatError("unknown token init: " + name);
}

}  // namespace

ordered_json config_to_json(const TrainingConfig& c) {
    return ordered_json{{"method", method_name(c.method)},
                        {"learning_rate", c.learning_rate},
                        {"batch_size", c.batch_size},
                        {"total_steps", c.total_steps},
                        {"weights",
                         {{"w_s", c.weights.w_s},
                          {"w_b", c.weights.w_b},
                          {"w_i", c.weights.w_i},
                          {"w_c_max", c.weights.w_c_max},
                          {"tau", c.weights.tau}}},
                        {"schedule", schedule_kind_name(c.schedule_kind)},
                        {"schedule_k", c.schedule_k},
                        {"pool_mix", {c.pool_mix[0], c.pool_mix[1], c.pool_mix[2]}},
                        {"seed", c.seed},
                        {"checkpoint_interval", c.checkpoint_interval},
                        {"normalize_contrastive", c.normalize_contrastive},
                        {"weight_decay", c.weight_decay},
                        {"neti_hidden", c.neti_hidden},
                        {"token_init", token_init_name(c.token_init)}};
}

TrainingConfig config_from_json(const ordered_json& j) {
    TrainingConfig c;
    c.method = method_from_name(j.at("method").get<std::string>());
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.total_steps = j.at("total_steps").get<int>();
    c.weights.w_s = j.at("weights").at("w_s").get<double>();
    c.weights.w_b = j.at("weights").at("w_b").get<double>();
    c.weights.w_i = j.at("weights").at("w_i").get<double>();
    c.weights.w_c_max = j.at("weights").at("w_c_max").get<double>();
    c.weights.tau = j.at("weights").at("tau").get<double>();
    c.schedule_kind = schedule_kind_from_name(j.at("schedule").get<std::string>());
    c.schedule_k = j.at("schedule_k").get<double>();
    for (int i = 0; i < 3; ++i) c.pool_mix[static_cast<size_t>(i)] = j.at("pool_mix").at(i).get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    c.checkpoint_interval = j.at("checkpoint_interval").get<int>();
    c.normalize_contrastive = j.at("normalize_contrastive").get<bool>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.neti_hidden = j.at("neti_hidden").get<int>();
    c.token_init = token_init_from_name(j.at("token_init").get<std::string>());
    return c;
}

const std::vector<std::string>& subject_caption_templates() { return single_slot_templates(); }

std::string fill_slots(const std::string& tmpl, const std::vector<std::string>& words) {
    std::string out = tmpl;
    size_t pos = 0;
    for (const std::string& v : words) {
        pos = out.find("{}", pos);
        if (pos == std::string::npos) throw SpecError("template is missing a {} slot: " + tmpl);
        out.replace(pos, 2, v);
        pos += v.size();
    }
    if (out.find("{}") != std::string::npos)
        throw SpecError("template has an unfilled {} slot: " + tmpl);
    return out;
}

std::string pool_kind_name(PoolKind kind) {
    switch (kind) {
        case PoolKind::kSubject: return "subject";
        case PoolKind::kBackground: return "background";
        case PoolKind::kJoint: return "joint";
    }
    throw SpecError("unknown pool kind");
}

PromptPools build_prompt_pools(const std::string& supercategory) {
    if (supercategory.empty()) throw SpecError("supercategory must be nonempty");
    const std::string s = to_lower(supercategory);
    if (s.find_first_of(" \t\n") != std::string::npos)
        throw SpecError("supercategory must be a single word: " + supercategory);
    PromptPools pools;
    for (const std::string& t : single_slot_templates()) {
        // A supercategory that collides with template vocabulary would break
        // the pool disjointness invariants.
        for (const std::string& word : tokenize_prompt(fill_slots(t, {"x"})))
            if (word == s)
                throw SpecError("supercategory '" + s + "' collides with a template word");
        pools.subject_pool.push_back(fill_slots(t, {kSubjectToken}));
    }
    for (const std::string& t : two_slot_templates()) {
        for (const std::string& word : tokenize_prompt(fill_slots(t, {"x", "y"})))
            if (word == s)
                throw SpecError("supercategory '" + s + "' collides with a template word");
        pools.background_pool.push_back(fill_slots(t, {s, kAttractorToken}));
        pools.joint_pool.push_back(fill_slots(t, {kSubjectToken, kAttractorToken}));
    }
    return pools;
}

WeightSchedule TrainingConfig::weight_schedule() const {
    WeightSchedule s = make_weight_schedule(schedule_kind, total_steps);
    if (schedule_k > 0) s.k = schedule_k;
    return s;
}

void TrainingConfig::check() const {
    // Zero is allowed as a diagnostic no-update mode.
    if (!(learning_rate >= 0) || !std::isfinite(learning_rate))
        throw SpecError("learning_rate must be finite and >= 0");
    if (batch_size < 1) throw SpecError("batch_size must be >= 1");
    if (total_steps < 1) throw SpecError("total_steps must be >= 1");
    if (neti_hidden < 1) throw SpecError("neti_hidden must be >= 1");
    if (weight_decay < 0 || !std::isfinite(weight_decay))
        throw SpecError("weight_decay must be finite and >= 0");
    weights.check();
    double sum = 0;
    for (double p : pool_mix) {
        if (p < 0 || !std::isfinite(p)) throw SpecError("pool_mix entries must be >= 0");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw SpecError("pool_mix must sum to 1");
    weight_schedule();  // validates kind/k
}

Mask downsample_mask(const Mask& mask, int target_h, int target_w) {
    if (target_h < 1 || target_w < 1) throw ShapeError("mask target resolution must be positive");
    if (mask.height % target_h != 0 || mask.width % target_w != 0)
        throw ShapeError("mask resolution " + std::to_string(mask.height) + "x" +
                         std::to_string(mask.width) + " is not a multiple of " +
                         std::to_string(target_h) + "x" + std::to_string(target_w));
    const int bh = mask.height / target_h;
    const int bw = mask.width / target_w;
    Mask out = Mask::zeros(target_h, target_w);
    for (int y = 0; y < target_h; ++y) {
        for (int x = 0; x < target_w; ++x) {
            int count = 0;
            for (int dy = 0; dy < bh; ++dy)
                for (int dx = 0; dx < bw; ++dx) count += mask.at(y * bh + dy, x * bw + dx) ? 1 : 0;
            out.at(y, x) = 2 * count >= bh * bw ? 1 : 0;
        }
    }
    return out;
}

SubjectData load_subject_data(const DatasetManifest& manifest, const std::string& subject_id,
                              const LatentCodec& codec) {
    const SubjectRecord& rec = manifest.subject(subject_id);
    if (rec.train_images.empty()) throw DataError("subject has no train images: " + subject_id);
    SubjectData out;
    out.subject_id = subject_id;
    out.supercategory = rec.supercategory;
    for (const ImageRecord& ir : rec.train_images) {
        if (ir.mask.empty()) throw DataError("train image missing mask: " + ir.image);
        const Image img = read_image(manifest.resolve(ir.image));
        const Mask mask = read_mask(manifest.resolve(ir.mask));
        if (mask.height != img.height || mask.width != img.width)
            throw DataError("mask resolution does not match image: " + ir.mask);
        Tensor latent = codec.encode(img);
        if (latent.ndim() != 3) throw DataError("codec produced a non-(C,H,W) latent");
        if (out.images.empty()) {
            out.latent_shape = latent.shape;
        } else if (latent.shape != out.latent_shape) {
            throw DataError("train images disagree on latent shape: " + ir.image);
        }
        TrainImageData data;
        data.id = ir.image;
        data.mask = downsample_mask(mask, latent.shape[1], latent.shape[2]);
        data.latent = std::move(latent);
        out.images.push_back(std::move(data));
    }
    return out;
}

TrainingBatch assemble_batch(const SubjectData& subject, const PromptPools& pools,
                             const TrainingConfig& config, int T, Rng& rng) {
    if (subject.images.empty()) throw DataError("subject has no train images");
    if (T < 1) throw SpecError("assemble_batch needs T >= 1");
    TrainingBatch batch;
    batch.subject_id = subject.subject_id;
    batch.records.reserve(static_cast<size_t>(config.batch_size));
    for (int i = 0; i < config.batch_size; ++i) {
        BatchRecord r;
        const double u = rng.uniform();
        const std::vector<std::string>* pool = nullptr;
        if (u < config.pool_mix[0]) {
            r.pool = PoolKind::kSubject;
            pool = &pools.subject_pool;
        } else if (u < config.pool_mix[0] + config.pool_mix[1]) {
            r.pool = PoolKind::kBackground;
            pool = &pools.background_pool;
        } else {
            r.pool = PoolKind::kJoint;
            pool = &pools.joint_pool;
        }
        r.prompt = (*pool)[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(pool->size()) - 1))];
        r.image_index = rng.uniform_int(0, static_cast<int>(subject.images.size()) - 1);
        r.image_id = subject.images[static_cast<size_t>(r.image_index)].id;
        r.t = rng.uniform_int(0, T - 1);
        r.noise = gaussian_latent(subject.latent_shape, rng);
        batch.records.push_back(std::move(r));
    }
    return batch;
}

Trainer::Trainer(const TrainingConfig& config, const DatasetManifest& manifest,
                 const std::string& subject_id, const EpsilonPredictor& model,
                 const TextEncoder& encoder, const LatentCodec& codec)
    : cfg_(config),
      schedule_(config.weight_schedule()),
      model_(&model),
      encoder_(&encoder),
      subject_(load_subject_data(manifest, subject_id, codec)),
      pools_(build_prompt_pools(subject_.supercategory)),
      rng_(split_seed(config.seed, 0x7EA17ULL)) {
    cfg_.check();
    table_ = register_tokens(manifest.subject(subject_id), encoder.dim(), cfg_.token_init,
                             encoder, split_seed(cfg_.seed, 0x70C5ULL));
    if (cfg_.method == Method::kNeTI) {
        neti_ = NeTIEmbedder::init(encoder.dim(), model.schedule().T, model.layer_count(),
                                   cfg_.neti_hidden, split_seed(cfg_.seed, 0x11E71ULL));
        // Start at the same point as TI: M_theta(t,l) ~= the registered v*.
        neti_.b2 = table_.subject_embedding;
    }
    register_params();
}

void Trainer::register_params() {
    params_.clear();
    auto add = [&](const std::string& name, const Tensor& value) {
        ParamSlot slot;
        slot.name = name;
        slot.m = Tensor::zeros(value.shape);
        slot.v = Tensor::zeros(value.shape);
        params_.push_back(std::move(slot));
    };
    if (cfg_.method == Method::kTI) {
        add("v_star", table_.subject_embedding);
    } else {
        add("neti/w1", neti_.w1);
        add("neti/b1", neti_.b1);
        add("neti/w2", neti_.w2);
        add("neti/b2", neti_.b2);
    }
    for (const auto& [id, tensor] : table_.attractor_embeddings) add("attractor/" + id, tensor);
}

Tensor& Trainer::param_ref(const std::string& name) {
    if (name == "v_star") return table_.subject_embedding;
    if (name == "neti/w1") return neti_.w1;
    if (name == "neti/b1") return neti_.b1;
    if (name == "neti/w2") return neti_.w2;
    if (name == "neti/b2") return neti_.b2;
    constexpr const char* kPrefix = "attractor/";
    if (name.rfind(kPrefix, 0) == 0) {
        Tensor* t = table_.find_attractor(name.substr(std::string(kPrefix).size()));
        if (t != nullptr) return *t;
    }
    throw SpecError("unknown learnable parameter: " + name);
}

TrainingBatch Trainer::next_batch() {
    return assemble_batch(subject_, pools_, cfg_, model_->schedule().T, rng_);
}

LossBreakdown Trainer::step_impl(const TrainingBatch& batch, bool update) {
    if (batch.subject_id != subject_.subject_id)
        throw SpecError("batch subject does not match trainer subject");
    if (batch.records.empty()) throw SpecError("empty training batch");

    ad::Tape tape(update);
    PromptEmbedder pe;
    pe.encoder = encoder_;
    pe.table = &table_;
    pe.method = cfg_.method;
    std::map<std::string, ad::Var> leaves;
    if (cfg_.method == Method::kTI) {
        pe.subject_var = tape.leaf(table_.subject_embedding);
        leaves["v_star"] = pe.subject_var;
    } else {
        pe.neti = &neti_;
        pe.neti_vars.w1 = tape.leaf(neti_.w1);
        pe.neti_vars.b1 = tape.leaf(neti_.b1);
        pe.neti_vars.w2 = tape.leaf(neti_.w2);
        pe.neti_vars.b2 = tape.leaf(neti_.b2);
        leaves["neti/w1"] = pe.neti_vars.w1;
        leaves["neti/b1"] = pe.neti_vars.b1;
        leaves["neti/w2"] = pe.neti_vars.w2;
        leaves["neti/b2"] = pe.neti_vars.b2;
    }
    for (const auto& [id, tensor] : table_.attractor_embeddings) {
        ad::Var leaf = tape.leaf(tensor);
        pe.attractor_vars[id] = leaf;
        leaves["attractor/" + id] = leaf;
    }

    std::vector<ad::Var> sub_losses, bg_losses, joint_losses;
    std::vector<ad::Var> v_contexts, a_contexts;
    for (const BatchRecord& r : batch.records) {
        if (r.image_index < 0 || static_cast<size_t>(r.image_index) >= subject_.images.size())
            throw IndexError("batch record image index out of range");
        const TrainImageData& im = subject_.images[static_cast<size_t>(r.image_index)];
        const ConditioningBundle bundle = embed_prompt(tape, pe, r.prompt, r.t, r.image_id);
        const Tensor z_t = add_noise(im.latent, r.noise, r.t, model_->schedule());
        ad::Var eps_hat = predict_eps(tape, *model_, tape.constant(z_t), r.t, bundle);
        ad::Var eps = tape.constant(r.noise);
        switch (r.pool) {
            case PoolKind::kSubject:
                sub_losses.push_back(masked_mse(tape, eps, eps_hat, im.mask));
                break;
            case PoolKind::kBackground:
                bg_losses.push_back(masked_mse(tape, eps, eps_hat, im.mask.complement()));
                break;
            case PoolKind::kJoint:
                joint_losses.push_back(joint_loss(tape, eps, eps_hat));
                break;
        }
        // Contextual embeddings for the contrastive term; NeTI contributes its
        // layer-0 sequence at the record's sampled timestep.
        if (r.pool != PoolKind::kBackground)
            v_contexts.push_back(extract_contextual(bundle, kSubjectToken, 0));
        if (r.pool != PoolKind::kSubject)
            a_contexts.push_back(extract_contextual(bundle, kAttractorToken, 0));
    }

    auto mean_or_zero = [&](std::vector<ad::Var>& xs) {
        if (xs.empty()) return tape.constant(Tensor::scalar(0.0));
        if (xs.size() == 1) return xs[0];
        return tape.scale(tape.add_scalars(xs), 1.0 / static_cast<double>(xs.size()));
    };
    ad::Var l_sub = mean_or_zero(sub_losses);
    ad::Var l_bg = mean_or_zero(bg_losses);
    ad::Var l_joint = mean_or_zero(joint_losses);

    const double w_c_eff = schedule_weight(step_, schedule_, cfg_.weights.w_c_max);
    ad::Var l_nce;  // stays invalid when the contrastive term is skipped
    if (w_c_eff != 0.0 && v_contexts.size() >= 2) {
        std::vector<std::pair<ad::Var, ad::Var>> positives, negatives;
        for (size_t i = 0; i < v_contexts.size(); ++i)
            for (size_t j = i + 1; j < v_contexts.size(); ++j)
                positives.emplace_back(v_contexts[i], v_contexts[j]);
        for (const ad::Var& v : v_contexts)
            for (const ad::Var& a : a_contexts) negatives.emplace_back(v, a);
        l_nce = info_nce(tape, positives, negatives, cfg_.weights.tau,
                         cfg_.normalize_contrastive);
    }
    ad::Var total = weighted_total(tape, l_sub, l_bg, l_joint, l_nce, cfg_.weights, w_c_eff);

    LossBreakdown bd;
    bd.l_sub = l_sub.value().data[0];
    bd.l_bg = l_bg.value().data[0];
    bd.l_joint = l_joint.value().data[0];
    bd.l_infonce = l_nce.valid() ? l_nce.value().data[0] : 0.0;
    bd.w_c_effective = w_c_eff;
    bd.total = total.value().data[0];
    auto check_finite = [&](double v, const char* name) {
        if (!std::isfinite(v))
            throw NonFiniteError(std::string(name) + " loss is non-finite at step " +
                                 std::to_string(step_));
    };
    check_finite(bd.l_sub, "subject");
    check_finite(bd.l_bg, "background");
    check_finite(bd.l_joint, "joint");
    check_finite(bd.l_infonce, "contrastive");
    check_finite(bd.total, "total");

    if (update) {
        tape.backward(total);

        std::vector<std::pair<ParamSlot*, Tensor>> grads;
        grads.reserve(params_.size());
        for (ParamSlot& slot : params_) {
            const ad::Var leaf = leaves.at(slot.name);
            Tensor g = tape.grad(leaf);
            if (g.data.empty()) g = Tensor::zeros(param_ref(slot.name).shape);
            grads.emplace_back(&slot, std::move(g));
        }
        adamw_update(grads);
        ++step_;
    }
    return bd;
}

void Trainer::adamw_update(const std::vector<std::pair<ParamSlot*, Tensor>>& grads) {
    ++adam_steps_;
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    const double bc1 = 1.0 - std::pow(kBeta1, adam_steps_);
    const double bc2 = 1.0 - std::pow(kBeta2, adam_steps_);
    for (const auto& [slot, g] : grads) {
        Tensor& theta = param_ref(slot->name);
        for (int64_t i = 0; i < theta.size(); ++i) {
            slot->m.data[i] = kBeta1 * slot->m.data[i] + (1.0 - kBeta1) * g.data[i];
            slot->v.data[i] = kBeta2 * slot->v.data[i] + (1.0 - kBeta2) * g.data[i] * g.data[i];
            const double m_hat = slot->m.data[i] / bc1;
            const double v_hat = slot->v.data[i] / bc2;
            theta.data[i] -= cfg_.learning_rate *
                             (m_hat / (std::sqrt(v_hat) + kEps) + cfg_.weight_decay * theta.data[i]);
        }
        if (!theta.all_finite())
            throw NonFiniteError("parameter " + slot->name + " became non-finite at step " +
                                 std::to_string(step_));
    }
}

void Trainer::run(const fs::path& out_dir) {
    fs::create_directories(out_dir);
    const fs::path trace_path = out_dir / "trace.jsonl";
    std::ofstream trace_file(trace_path,
                             step_ > 0 ? std::ios::out | std::ios::app : std::ios::out);
    if (!trace_file) throw DataError("cannot open trace file: " + trace_path.string());
    while (step_ < cfg_.total_steps) {
        const int executing = step_;
        const LossBreakdown bd = train_one();
        trace_.push_back(bd);
        const ordered_json line = {{"step", executing},
                                   {"subject", bd.l_sub},
                                   {"background", bd.l_bg},
                                   {"joint", bd.l_joint},
                                   {"contrastive", bd.l_infonce},
                                   {"total", bd.total},
                                   {"contrastive_weight", bd.w_c_effective}};
        trace_file << line.dump() << "\n";
        if (cfg_.checkpoint_interval > 0 && step_ % cfg_.checkpoint_interval == 0) {
            char name[40];
            std::snprintf(name, sizeof(name), "checkpoint_step%06d.pzar", step_);
            checkpoint().save(out_dir / name);
        }
    }
    trace_file.flush();
    if (!trace_file) throw DataError("failed writing trace file: " + trace_path.string());
    checkpoint().save(out_dir / "checkpoint_final.pzar");
}

Archive Trainer::checkpoint() const {
    Archive a;
    a.meta["kind"] = "checkpoint";
    a.meta["subject_id"] = subject_.subject_id;
    a.meta["supercategory"] = subject_.supercategory;
    a.meta["step"] = step_;
    a.meta["adam_steps"] = adam_steps_;
    a.meta["rng_state"] = rng_.state();
    a.meta["config"] = config_to_json(cfg_);
    ordered_json ids = ordered_json::array();
    for (const auto& [id, tensor] : table_.attractor_embeddings) ids.push_back(id);
    a.meta["attractor_ids"] = ids;
    if (cfg_.method == Method::kNeTI)
        a.meta["neti"] = {{"T", neti_.T}, {"L", neti_.L}, {"hidden", neti_.hidden}};
    a.put("v_star", table_.subject_embedding);
    for (const auto& [id, tensor] : table_.attractor_embeddings) a.put("attractor/" + id, tensor);
    if (cfg_.method == Method::kNeTI) {
        a.put("neti/w1", neti_.w1);
        a.put("neti/b1", neti_.b1);
        a.put("neti/w2", neti_.w2);
        a.put("neti/b2", neti_.b2);
    }
    for (const ParamSlot& slot : params_) {
        a.put("adam/m/" + slot.name, slot.m);
        a.put("adam/v/" + slot.name, slot.v);
    }
    return a;
}

Trainer Trainer::resume(const Archive& archive, const DatasetManifest& manifest,
                        const EpsilonPredictor& model, const TextEncoder& encoder,
                        const LatentCodec& codec) {
    if (!archive.meta.contains("kind") || archive.meta.at("kind") != "checkpoint")
        throw FormatError("archive is not a trainer checkpoint");
    const TrainingConfig cfg = config_from_json(archive.meta.at("config"));
    Trainer t(cfg, manifest, archive.meta.at("subject_id").get<std::string>(), model, encoder,
              codec);
    t.step_ = archive.meta.at("step").get<int>();
    t.adam_steps_ = archive.meta.at("adam_steps").get<int>();
    t.rng_.set_state(archive.meta.at("rng_state").get<std::string>());
    t.table_.subject_embedding = archive.get("v_star");
    for (const auto& id_json : archive.meta.at("attractor_ids")) {
        const std::string id = id_json.get<std::string>();
        Tensor* dst = t.table_.find_attractor(id);
        if (dst == nullptr)
            throw FormatError("checkpoint attractor does not match the manifest: " + id);
        *dst = archive.get("attractor/" + id);
    }
    if (cfg.method == Method::kNeTI) {
        t.neti_.w1 = archive.get("neti/w1");
        t.neti_.b1 = archive.get("neti/b1");
        t.neti_.w2 = archive.get("neti/w2");
        t.neti_.b2 = archive.get("neti/b2");
    }
    for (ParamSlot& slot : t.params_) {
        slot.m = archive.get("adam/m/" + slot.name);
        slot.v = archive.get("adam/v/" + slot.name);
    }
    return t;
}

PromptEmbedder Trainer::embedder() const {
    PromptEmbedder pe;
    pe.encoder = encoder_;
    pe.table = &table_;
    pe.method = cfg_.method;
    if (cfg_.method == Method::kNeTI) pe.neti = &neti_;
    return pe;
}

void save_checkpoint(const Trainer& trainer, const fs::path& path) {
    trainer.checkpoint().save(path);
}

Archive load_checkpoint(const fs::path& path) { return Archive::load(path); }

}  // namespace personalize
