#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "personalize/archive.hpp"
#include "personalize/backend.hpp"
#include "personalize/dataset.hpp"
#include "personalize/image.hpp"
#include "personalize/trainer.hpp"

namespace personalize {

// ---------------------------------------------------------------------------
// Embedding models
// ---------------------------------------------------------------------------

enum class EmbeddingFamily { kContrastiveTextImage, kSelfSupervisedImage };
std::string embedding_family_name(EmbeddingFamily family);

// Pluggable scorer backend. Outputs are unit-normalized and deterministic per
// input. Only the contrastive family embeds text; the self-supervised image
// family throws SpecError from embed_text.
class EmbeddingModel {
public:
    virtual ~EmbeddingModel() = default;
    virtual EmbeddingFamily family() const = 0;
    virtual int dim() const = 0;
    virtual Tensor embed_image(const Image& image) const = 0;
    virtual Tensor embed_text(const std::string& text) const = 0;
};

// Offline stub: hash-seeded random projection of 4x4 average-pooled pixel
// statistics; text side averages hash-seeded word vectors. Nearby images map
// to nearby embeddings, which is all the toy metrics rely on.
class StubContrastiveEmbedder final : public EmbeddingModel {
public:
    explicit StubContrastiveEmbedder(int dim = 32, uint64_t seed = 0x57AB1);

    EmbeddingFamily family() const override { return EmbeddingFamily::kContrastiveTextImage; }
    int dim() const override { return dim_; }
    Tensor embed_image(const Image& image) const override;
    Tensor embed_text(const std::string& text) const override;

private:
    int dim_;
    uint64_t seed_;
};

// Offline stub for the image-only family: an independent projection over an
// 8x8 pooling grid, so its similarities are not degenerate with the
// contrastive family's.
class StubSelfSupEmbedder final : public EmbeddingModel {
public:
    explicit StubSelfSupEmbedder(int dim = 32, uint64_t seed = 0xD1AB2);

    EmbeddingFamily family() const override { return EmbeddingFamily::kSelfSupervisedImage; }
    int dim() const override { return dim_; }
    Tensor embed_image(const Image& image) const override;
    Tensor embed_text(const std::string& text) const override;  // SpecError

private:
    int dim_;
    uint64_t seed_;
};

// Cosine of two equal-dimension vectors, clamped into [-1, 1]. A zero-norm
// input scores 0. DimensionError on mismatched sizes.
double cosine_similarity(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Evaluation plan
// ---------------------------------------------------------------------------

enum class EvalSplit { kTrain, kTest };
std::string split_name(EvalSplit split);

// One generation-and-scoring unit: a reference image, a caption with its "{}"
// slot, and a derived seed. `prompt` fills the slot with <v*> (conditioning);
// `text_query` fills it with the supercategory word (text scoring).
struct EvalTask {
    std::string subject_id;
    std::string supercategory;
    std::string image_id;  // reference key (manifest-relative path)
    std::string caption;
    std::string prompt;
    std::string text_query;
    int caption_index = 0;
    int sample_index = 0;
    uint64_t seed = 0;
};

std::string task_key(const EvalTask& task);

struct EvaluationPlan {
    EvalSplit split = EvalSplit::kTest;
    int images_per_prompt = 0;
    uint64_t seed = 0;
    std::vector<EvalTask> tasks;
    std::map<std::string, Image> references;  // image_id -> reference image
};

// Enumerates subjects x reference images x captions x images_per_prompt in
// manifest order with per-task seeds derived from `seed`. The test split uses
// stored test captions; the train split is the diagnostic mode: training
// templates as captions, training images as references.
EvaluationPlan build_plan(const DatasetManifest& manifest, EvalSplit split, int images_per_prompt,
                          uint64_t seed);

// The sub-plan for one subject (checkpoints are per-subject).
EvaluationPlan restrict_plan(const EvaluationPlan& plan, const std::string& subject_id);

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

// Learned-token state reconstructed from a trainer checkpoint, sufficient to
// condition the frozen backbone. FormatError on a non-checkpoint archive.
struct GenerationContext {
    Method method = Method::kTI;
    std::string subject_id;
    std::string supercategory;
    int step = 0;
    std::string checkpoint_id;  // "<subject>-step<N>"
    TokenTable table;
    NeTIEmbedder neti;  // populated when method == kNeTI
};

GenerationContext make_generation_context(const Archive& checkpoint);

struct GenerationSettings {
    int steps = 20;
    double guidance = 1.0;  // 1.0 = off; otherwise the supercategory prompt
                            // (no pseudo-token) serves as the baseline
};

struct GeneratedSet {
    std::string checkpoint_id;
    std::map<std::string, Image> images;  // task_key -> decoded sample
};

// Runs the deterministic sampler once per task. Every task's subject must
// match one of the checkpoints (SpecError otherwise); NeTI conditioning is
// re-embedded at each sampler timestep.
GeneratedSet run_generation(const EvaluationPlan& plan, const std::vector<Archive>& checkpoints,
                            const EpsilonPredictor& model, const TextEncoder& encoder,
                            const LatentCodec& codec, const GenerationSettings& settings = {});
GeneratedSet run_generation(const EvaluationPlan& plan, const Archive& checkpoint,
                            const EpsilonPredictor& model, const TextEncoder& encoder,
                            const LatentCodec& codec, const GenerationSettings& settings = {});

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

struct PerImageScore {
    std::string key;
    std::string subject_id;
    std::string image_id;
    int caption_index = 0;
    int sample_index = 0;
    double text_image_sim = 0.0;
    double image_image_sim_contrastive = 0.0;
    double image_image_sim_selfsup = 0.0;
};

struct ScoreSummary {
    std::string subject_id;  // "aggregate" for the overall row
    int count = 0;
    double text_image_sim = 0.0;
    double image_image_sim_contrastive = 0.0;
    double image_image_sim_selfsup = 0.0;
};

struct EvaluationReport {
    std::string checkpoint_id;
    EvalSplit split = EvalSplit::kTest;
    int count = 0;
    ScoreSummary aggregate;
    std::vector<ScoreSummary> per_subject;  // ordered by subject id
    std::vector<PerImageScore> per_image;   // plan order, for recomputation
};

// Scores every plan task: text score = cosine(text embedding of the
// supercategory-filled caption, image embedding of the sample); image-image
// scores compare the sample against the task's reference image under each
// family. MissingOutputError when a task has no stored image.
EvaluationReport score(const GeneratedSet& generated, const EvaluationPlan& plan,
                       const EmbeddingModel& contrastive, const EmbeddingModel& selfsup);

nlohmann::ordered_json report_to_json(const EvaluationReport& report);
void write_report(const EvaluationReport& report, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Overfit curve
// ---------------------------------------------------------------------------

struct CurveRow {
    std::string checkpoint_id;
    int step = 0;
    EvalSplit split = EvalSplit::kTest;
    int count = 0;
    double text_image_sim = 0.0;
    double image_image_sim_contrastive = 0.0;
    double image_image_sim_selfsup = 0.0;
};

struct CurveReport {
    std::string subject_id;
    std::vector<CurveRow> rows;  // ordered by step, train row before test row
};

struct CurveOptions {
    int images_per_prompt = 1;
    uint64_t seed = 0;
    GenerationSettings generation;
};

// Re-evaluates each checkpoint of one training trajectory on both splits
// through the single scoring path. Needs >= 2 checkpoints, all for the same
// subject (SpecError otherwise).
CurveReport overfit_curve(const std::vector<Archive>& checkpoints,
                          const DatasetManifest& manifest, const EpsilonPredictor& model,
                          const TextEncoder& encoder, const LatentCodec& codec,
                          const EmbeddingModel& contrastive, const EmbeddingModel& selfsup,
                          const CurveOptions& options = {});

nlohmann::ordered_json curve_to_json(const CurveReport& curve);
void write_curve(const CurveReport& curve, const std::filesystem::path& path);

// Fixed-layout SVG line plot of the curve (three metrics x two splits).
void write_curve_svg(const CurveReport& curve, const std::filesystem::path& path);

}  // namespace personalize
