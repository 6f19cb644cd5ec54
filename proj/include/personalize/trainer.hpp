#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "personalize/archive.hpp"
#include "personalize/backend.hpp"
#include "personalize/dataset.hpp"
#include "personalize/embedders.hpp"
#include "personalize/losses.hpp"

namespace personalize {

// Three disjoint prompt pools built from the fixed template lists: subject
// prompts mention only <v*>, background prompts pair the supercategory word
// with <A*>, joint prompts carry both pseudo-tokens.
struct PromptPools {
    std::vector<std::string> subject_pool;
    std::vector<std::string> background_pool;
    std::vector<std::string> joint_pool;
};

PromptPools build_prompt_pools(const std::string& supercategory);

// The raw single-slot templates behind the subject pool ("a photo of a {}.").
// The evaluation harness reuses them as train-split captions.
const std::vector<std::string>& subject_caption_templates();

// Replaces each "{}" in order; SpecError if slot and word counts differ.
std::string fill_slots(const std::string& tmpl, const std::vector<std::string>& words);

enum class PoolKind { kSubject, kBackground, kJoint };
std::string pool_kind_name(PoolKind kind);

struct TrainingConfig {
    Method method = Method::kTI;
    double learning_rate = 1e-5;
    int batch_size = 8;
    int total_steps = 100;
    LossWeights weights;
    ScheduleKind schedule_kind = ScheduleKind::kSigmoid;
    double schedule_k = 0.0;  // 0 = kind default
    std::array<double, 3> pool_mix = {0.25, 0.25, 0.5};
    uint64_t seed = 0;
    int checkpoint_interval = 0;  // 0 = final checkpoint only
    bool normalize_contrastive = true;
    double weight_decay = 0.0;
    int neti_hidden = 32;
    TokenInit token_init = TokenInit::kSupercategoryWord;

    WeightSchedule weight_schedule() const;
    void check() const;  // SpecError
};

// Round-trippable config serialization, used by checkpoints and run configs.
nlohmann::ordered_json config_to_json(const TrainingConfig& config);
TrainingConfig config_from_json(const nlohmann::ordered_json& j);

struct BatchRecord {
    PoolKind pool = PoolKind::kSubject;
    int image_index = 0;
    std::string image_id;  // manifest path; resolves <A*>
    std::string prompt;
    int t = 0;
    Tensor noise;
};

struct TrainingBatch {
    std::string subject_id;
    std::vector<BatchRecord> records;
};

// Preloaded per-subject training data: encoded latents plus subject masks
// downsampled to latent resolution.
struct TrainImageData {
    std::string id;
    Tensor latent;
    Mask mask;
};

struct SubjectData {
    std::string subject_id;
    std::string supercategory;
    std::vector<TrainImageData> images;
    std::vector<int> latent_shape;
};

SubjectData load_subject_data(const DatasetManifest& manifest, const std::string& subject_id,
                              const LatentCodec& codec);

// Area-majority downsampling: a target cell is subject iff >= half of its
// source pixels are. Source dimensions must be integer multiples of the
// target's. The background mask is the complement of the downsampled subject
// mask, so complementarity survives the resolution change.
Mask downsample_mask(const Mask& mask, int target_h, int target_w);

// Samples batch_size records with replacement: pool kind ~ pool_mix, then a
// uniform template, uniform train image, uniform t in [0,T), fresh noise.
TrainingBatch assemble_batch(const SubjectData& subject, const PromptPools& pools,
                             const TrainingConfig& config, int T, Rng& rng);

// Owns the learnable state (v*, attractors, NeTI net, optimizer moments, RNG
// stream, step counter). Encoder, denoiser backbone, and codec stay frozen.
class Trainer {
public:
    Trainer(const TrainingConfig& config, const DatasetManifest& manifest,
            const std::string& subject_id, const EpsilonPredictor& model,
            const TextEncoder& encoder, const LatentCodec& codec);

    TrainingBatch next_batch();
    LossBreakdown apply_step(const TrainingBatch& batch) { return step_impl(batch, true); }
    LossBreakdown train_one() { return apply_step(next_batch()); }
    // Computes the loss breakdown for a batch without touching any state
    // (no parameter update, no step/RNG advance).
    LossBreakdown evaluate(const TrainingBatch& batch) { return step_impl(batch, false); }

    // Runs the remaining steps, appending one trace line per step to
    // <out_dir>/trace.jsonl and writing interval checkpoints plus
    // <out_dir>/checkpoint_final.pzar.
    void run(const std::filesystem::path& out_dir);

    Archive checkpoint() const;
    static Trainer resume(const Archive& archive, const DatasetManifest& manifest,
                          const EpsilonPredictor& model, const TextEncoder& encoder,
                          const LatentCodec& codec);

    int current_step() const { return step_; }
    const TrainingConfig& config() const { return cfg_; }
    const TokenTable& tokens() const { return table_; }
    const NeTIEmbedder* neti() const { return cfg_.method == Method::kNeTI ? &neti_ : nullptr; }
    const SubjectData& subject() const { return subject_; }
    const PromptPools& pools() const { return pools_; }
    const std::vector<LossBreakdown>& trace() const { return trace_; }
    std::string rng_state() const { return rng_.state(); }

    // Embedder view over the CURRENT learned tokens (constants, no leaves).
    PromptEmbedder embedder() const;

private:
    struct ParamSlot {
        std::string name;
        Tensor* value = nullptr;
        Tensor m, v;  // Adam moments
    };

    void register_params();
    Tensor& param_ref(const std::string& name);
    LossBreakdown step_impl(const TrainingBatch& batch, bool update);
    void adamw_update(const std::vector<std::pair<ParamSlot*, Tensor>>& grads);

    TrainingConfig cfg_;
    WeightSchedule schedule_;
    const EpsilonPredictor* model_;
    const TextEncoder* encoder_;
    SubjectData subject_;
    PromptPools pools_;
    TokenTable table_;
    NeTIEmbedder neti_;  // meaningful when method == kNeTI
    std::vector<ParamSlot> params_;
    Rng rng_;
    int step_ = 0;
    int adam_steps_ = 0;
    std::vector<LossBreakdown> trace_;
};

void save_checkpoint(const Trainer& trainer, const std::filesystem::path& path);
Archive load_checkpoint(const std::filesystem::path& path);  // FormatError/VersionError

}  // namespace personalize
