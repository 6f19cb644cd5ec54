#include "personalize/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "personalize/errors.hpp"
#include "personalize/rng.hpp"

namespace personalize {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Embedding models
// ---------------------------------------------------------------------------

std::string embedding_family_name(EmbeddingFamily family) {
    return family == EmbeddingFamily::kContrastiveTextImage ? "contrastive-text-image"
                                                            : "self-supervised-image";
}

namespace {

// Pixel statistics feeding the stub projections: per-channel average pooling
// to a fixed grid plus a constant bias entry, so the vector is never zero.
std::vector<double> image_stats(const Image& image, int grid) {
    const Image pooled = average_pool(image, grid, grid);
    std::vector<double> stats = pooled.data;
    stats.push_back(1.0);
    return stats;
}

// Deterministic random projection of `stats`, unit-normalized. Row i of the
// projection matrix is regenerated on demand from (seed, i).
Tensor project_stats(const std::vector<double>& stats, int dim, uint64_t seed) {
    Tensor out = Tensor::zeros({dim});
    for (int i = 0; i < dim; ++i) {
        Rng row_rng(split_seed(seed, static_cast<uint64_t>(i) * 2 + 1));
        double acc = 0.0;
        for (double s : stats) acc += s * row_rng.gaussian();
        out.data[static_cast<size_t>(i)] = acc;
    }
    double norm = 0.0;
    for (double v : out.data) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 0.0)
        for (double& v : out.data) v /= norm;
    return out;
}

// Hash-seeded unit-scale word vector for the bag-of-words text stub.
void accumulate_word(std::vector<double>& acc, const std::string& word, uint64_t seed) {
    Rng rng(split_seed(seed, hash_string(word)));
    for (double& v : acc) v += rng.gaussian();
}

}  // namespace

StubContrastiveEmbedder::StubContrastiveEmbedder(int dim, uint64_t seed)
    : dim_(dim), seed_(seed) {
    if (dim < 1) throw SpecError("embedding dimension must be positive");
}

Tensor StubContrastiveEmbedder::embed_image(const Image& image) const {
    return project_stats(image_stats(image, 4), dim_, seed_);
}

Tensor StubContrastiveEmbedder::embed_text(const std::string& text) const {
    std::vector<double> acc(static_cast<size_t>(dim_), 0.0);
    accumulate_word(acc, "<text>", seed_);  // anchor: empty text still embeds
    for (const std::string& word : tokenize_prompt(text)) accumulate_word(acc, word, seed_);
    Tensor out({dim_}, acc);
    double norm = 0.0;
    for (double v : out.data) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 0.0)
        for (double& v : out.data) v /= norm;
    return out;
}

StubSelfSupEmbedder::StubSelfSupEmbedder(int dim, uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim < 1) throw SpecError("embedding dimension must be positive");
}

Tensor StubSelfSupEmbedder::embed_image(const Image& image) const {
    return project_stats(image_stats(image, 8), dim_, seed_);
}

Tensor StubSelfSupEmbedder::embed_text(const std::string&) const {
    throw SpecError("the self-supervised image family does not embed text");
}

double cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size())
        throw DimensionError("cosine_similarity: dimensions differ: " +
                             std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        dot += a.data[static_cast<size_t>(i)] * b.data[static_cast<size_t>(i)];
        na += a.data[static_cast<size_t>(i)] * a.data[static_cast<size_t>(i)];
        nb += b.data[static_cast<size_t>(i)] * b.data[static_cast<size_t>(i)];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Evaluation plan
// ---------------------------------------------------------------------------

std::string split_name(EvalSplit split) {
    return split == EvalSplit::kTrain ? "train" : "test";
}

std::string task_key(const EvalTask& task) {
    std::ostringstream os;
    os << task.subject_id << "|" << task.image_id << "|c" << task.caption_index << "|s"
       << task.sample_index;
    return os.str();
}

EvaluationPlan build_plan(const DatasetManifest& manifest, EvalSplit split, int images_per_prompt,
                          uint64_t seed) {
    if (images_per_prompt < 1) throw SpecError("images_per_prompt must be >= 1");

    EvaluationPlan plan;
    plan.split = split;
    plan.images_per_prompt = images_per_prompt;
    plan.seed = seed;

    uint64_t ordinal = 0;
    for (const SubjectRecord& subject : manifest.subjects) {
        const auto& records =
            split == EvalSplit::kTest ? subject.test_images : subject.train_images;
        if (records.empty())
            throw SpecError("subject " + subject.subject_id + " has no " + split_name(split) +
                            " images to evaluate");
        for (const ImageRecord& rec : records) {
            // Test captions come from the manifest; the train-split diagnostic
            // reuses the single-slot training templates.
            const std::vector<std::string>& captions =
                split == EvalSplit::kTest ? rec.captions : subject_caption_templates();
            if (captions.empty())
                throw SpecError("test image " + rec.image + " has no captions");
            if (plan.references.find(rec.image) == plan.references.end())
                plan.references.emplace(rec.image, read_image(manifest.resolve(rec.image)));
            for (size_t c = 0; c < captions.size(); ++c) {
                for (int k = 0; k < images_per_prompt; ++k) {
                    EvalTask task;
                    task.subject_id = subject.subject_id;
                    task.supercategory = subject.supercategory;
                    task.image_id = rec.image;
                    task.caption = captions[c];
                    task.prompt = fill_slots(captions[c], {kSubjectToken});
                    task.text_query = fill_slots(captions[c], {subject.supercategory});
                    task.caption_index = static_cast<int>(c);
                    task.sample_index = k;
                    task.seed = split_seed(seed, ordinal);
                    ++ordinal;
                    plan.tasks.push_back(std::move(task));
                }
            }
        }
    }
    if (plan.tasks.empty()) throw SpecError("evaluation plan is empty");
    return plan;
}

EvaluationPlan restrict_plan(const EvaluationPlan& plan, const std::string& subject_id) {
    EvaluationPlan out;
    out.split = plan.split;
    out.images_per_prompt = plan.images_per_prompt;
    out.seed = plan.seed;
    for (const EvalTask& task : plan.tasks) {
        if (task.subject_id != subject_id) continue;
        out.tasks.push_back(task);
        if (out.references.find(task.image_id) == out.references.end())
            out.references.emplace(task.image_id, plan.references.at(task.image_id));
    }
    if (out.tasks.empty())
        throw SpecError("plan has no tasks for subject " + subject_id);
    return out;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

GenerationContext make_generation_context(const Archive& checkpoint) {
    if (!checkpoint.meta.contains("kind") ||
        checkpoint.meta.at("kind").get<std::string>() != "checkpoint")
        throw FormatError("archive is not a trainer checkpoint");

    GenerationContext ctx;
    const TrainingConfig cfg = config_from_json(checkpoint.meta.at("config"));
    ctx.method = cfg.method;
    ctx.subject_id = checkpoint.meta.at("subject_id").get<std::string>();
    ctx.supercategory = checkpoint.meta.at("supercategory").get<std::string>();
    ctx.step = checkpoint.meta.at("step").get<int>();
    ctx.checkpoint_id = ctx.subject_id + "-step" + std::to_string(ctx.step);

    ctx.table.subject_id = ctx.subject_id;
    ctx.table.subject_embedding = checkpoint.get("v_star");
    ctx.table.d = static_cast<int>(ctx.table.subject_embedding.size());
    for (const auto& id : checkpoint.meta.at("attractor_ids"))
        ctx.table.attractor_embeddings.emplace_back(id.get<std::string>(),
                                                    checkpoint.get("attractor/" + id.get<std::string>()));

    if (ctx.method == Method::kNeTI) {
        const auto& nj = checkpoint.meta.at("neti");
        ctx.neti.d = ctx.table.d;
        ctx.neti.T = nj.at("T").get<int>();
        ctx.neti.L = nj.at("L").get<int>();
        ctx.neti.hidden = nj.at("hidden").get<int>();
        ctx.neti.w1 = checkpoint.get("neti/w1");
        ctx.neti.b1 = checkpoint.get("neti/b1");
        ctx.neti.w2 = checkpoint.get("neti/w2");
        ctx.neti.b2 = checkpoint.get("neti/b2");
    }
    return ctx;
}

GeneratedSet run_generation(const EvaluationPlan& plan, const std::vector<Archive>& checkpoints,
                            const EpsilonPredictor& model, const TextEncoder& encoder,
                            const LatentCodec& codec, const GenerationSettings& settings) {
    if (settings.steps < 1) throw SpecError("generation steps must be >= 1");

    std::map<std::string, GenerationContext> contexts;
    for (const Archive& a : checkpoints) {
        GenerationContext ctx = make_generation_context(a);
        if (ctx.method == Method::kNeTI &&
            (ctx.neti.T != model.schedule().T || ctx.neti.L != model.layer_count()))
            throw SpecError("checkpoint " + ctx.checkpoint_id +
                            " was trained against a different backbone geometry");
        const std::string subject = ctx.subject_id;
        if (!contexts.emplace(subject, std::move(ctx)).second)
            throw SpecError("duplicate checkpoint for subject " + subject);
    }

    GeneratedSet out;
    {
        std::string joined;
        for (const auto& [subject, ctx] : contexts)
            joined += (joined.empty() ? "" : "+") + ctx.checkpoint_id;
        out.checkpoint_id = joined;
    }

    for (const EvalTask& task : plan.tasks) {
        const auto it = contexts.find(task.subject_id);
        if (it == contexts.end())
            throw SpecError("no checkpoint provided for subject " + task.subject_id);
        const GenerationContext& ctx = it->second;

        ad::Tape tape(false);
        PromptEmbedder pe;
        pe.encoder = &encoder;
        pe.table = &ctx.table;
        pe.method = ctx.method;
        if (ctx.method == Method::kNeTI) pe.neti = &ctx.neti;

        const ConditioningProvider cond = [&](ad::Tape& t, int timestep) {
            return embed_prompt(t, pe, task.prompt, timestep);
        };
        SampleOptions opts;
        opts.steps = settings.steps;
        opts.seed = task.seed;
        opts.guidance = settings.guidance;

        const std::vector<int> latent_shape =
            codec.encode(plan.references.at(task.image_id)).shape;
        Tensor latent;
        if (settings.guidance != 1.0) {
            // Baseline for guidance: the same caption without personalization.
            const ConditioningProvider uncond = [&](ad::Tape& t, int timestep) {
                return embed_prompt(t, pe, task.text_query, timestep);
            };
            latent = sample(tape, model, cond, latent_shape, opts, &uncond);
        } else {
            latent = sample(tape, model, cond, latent_shape, opts, nullptr);
        }
        out.images.emplace(task_key(task), codec.decode(latent));
    }
    return out;
}

GeneratedSet run_generation(const EvaluationPlan& plan, const Archive& checkpoint,
                            const EpsilonPredictor& model, const TextEncoder& encoder,
                            const LatentCodec& codec, const GenerationSettings& settings) {
    std::vector<Archive> one;
    one.push_back(checkpoint);
    return run_generation(plan, one, model, encoder, codec, settings);
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

EvaluationReport score(const GeneratedSet& generated, const EvaluationPlan& plan,
                       const EmbeddingModel& contrastive, const EmbeddingModel& selfsup) {
    if (contrastive.family() != EmbeddingFamily::kContrastiveTextImage)
        throw SpecError("first embedding model must be the contrastive text-image family");
    if (selfsup.family() != EmbeddingFamily::kSelfSupervisedImage)
        throw SpecError("second embedding model must be the self-supervised image family");

    EvaluationReport report;
    report.checkpoint_id = generated.checkpoint_id;
    report.split = plan.split;

    // Reference embeddings are shared across tasks; compute each once.
    std::map<std::string, Tensor> ref_contrastive, ref_selfsup;
    for (const auto& [id, image] : plan.references) {
        ref_contrastive.emplace(id, contrastive.embed_image(image));
        ref_selfsup.emplace(id, selfsup.embed_image(image));
    }

    struct Sums {
        int count = 0;
        double text = 0.0, iic = 0.0, iis = 0.0;
    };
    std::map<std::string, Sums> by_subject;
    Sums total;

    for (const EvalTask& task : plan.tasks) {
        const std::string key = task_key(task);
        const auto it = generated.images.find(key);
        if (it == generated.images.end())
            throw MissingOutputError("no generated image for task " + key);
        const Image& sample = it->second;

        PerImageScore row;
        row.key = key;
        row.subject_id = task.subject_id;
        row.image_id = task.image_id;
        row.caption_index = task.caption_index;
        row.sample_index = task.sample_index;
        const Tensor img_c = contrastive.embed_image(sample);
        row.text_image_sim = cosine_similarity(contrastive.embed_text(task.text_query), img_c);
        row.image_image_sim_contrastive =
            cosine_similarity(img_c, ref_contrastive.at(task.image_id));
        row.image_image_sim_selfsup =
            cosine_similarity(selfsup.embed_image(sample), ref_selfsup.at(task.image_id));
        report.per_image.push_back(row);

        Sums& s = by_subject[task.subject_id];
        s.count += 1;
        s.text += row.text_image_sim;
        s.iic += row.image_image_sim_contrastive;
        s.iis += row.image_image_sim_selfsup;
        total.count += 1;
        total.text += row.text_image_sim;
        total.iic += row.image_image_sim_contrastive;
        total.iis += row.image_image_sim_selfsup;
    }

    auto to_summary = [](const std::string& id, const Sums& s) {
        ScoreSummary out;
        out.subject_id = id;
        out.count = s.count;
        out.text_image_sim = s.text / s.count;
        out.image_image_sim_contrastive = s.iic / s.count;
        out.image_image_sim_selfsup = s.iis / s.count;
        return out;
    };
    for (const auto& [id, sums] : by_subject) report.per_subject.push_back(to_summary(id, sums));
    report.aggregate = to_summary("aggregate", total);
    report.count = total.count;
    return report;
}

namespace {

ordered_json summary_to_json(const ScoreSummary& s) {
    return ordered_json{{"subject", s.subject_id},
                        {"count", s.count},
                        {"text_image_sim", s.text_image_sim},
                        {"image_image_sim_contrastive", s.image_image_sim_contrastive},
                        {"image_image_sim_selfsup", s.image_image_sim_selfsup}};
}

}  // namespace

ordered_json report_to_json(const EvaluationReport& report) {
    ordered_json per_subject = ordered_json::array();
    for (const ScoreSummary& s : report.per_subject) per_subject.push_back(summary_to_json(s));
    ordered_json per_image = ordered_json::array();
    for (const PerImageScore& r : report.per_image)
        per_image.push_back(ordered_json{{"key", r.key},
                                         {"subject", r.subject_id},
                                         {"image", r.image_id},
                                         {"caption_index", r.caption_index},
                                         {"sample_index", r.sample_index},
                                         {"text_image_sim", r.text_image_sim},
                                         {"image_image_sim_contrastive",
                                          r.image_image_sim_contrastive},
                                         {"image_image_sim_selfsup", r.image_image_sim_selfsup}});
    return ordered_json{{"checkpoint", report.checkpoint_id},
                        {"split", split_name(report.split)},
                        {"count", report.count},
                        {"aggregate", summary_to_json(report.aggregate)},
                        {"per_subject", per_subject},
                        {"per_image", per_image}};
}

void write_report(const EvaluationReport& report, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw MissingFileError("cannot write report to " + path.string());
    out << report_to_json(report).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Overfit curve
// ---------------------------------------------------------------------------

CurveReport overfit_curve(const std::vector<Archive>& checkpoints,
                          const DatasetManifest& manifest, const EpsilonPredictor& model,
                          const TextEncoder& encoder, const LatentCodec& codec,
                          const EmbeddingModel& contrastive, const EmbeddingModel& selfsup,
                          const CurveOptions& options) {
    if (checkpoints.size() < 2) throw SpecError("overfit_curve needs at least two checkpoints");

    std::vector<std::pair<GenerationContext, const Archive*>> entries;
    for (const Archive& a : checkpoints) entries.emplace_back(make_generation_context(a), &a);
    const std::string subject = entries.front().first.subject_id;
    for (const auto& [ctx, archive] : entries)
        if (ctx.subject_id != subject)
            throw SpecError("overfit_curve checkpoints span multiple subjects: " + subject +
                            " vs " + ctx.subject_id);
    std::stable_sort(entries.begin(), entries.end(),
                     [](const auto& a, const auto& b) { return a.first.step < b.first.step; });

    // Both splits flow through the same plan/generation/scoring path; only the
    // caption and reference sources differ.
    const EvaluationPlan train_plan = restrict_plan(
        build_plan(manifest, EvalSplit::kTrain, options.images_per_prompt, options.seed), subject);
    const EvaluationPlan test_plan = restrict_plan(
        build_plan(manifest, EvalSplit::kTest, options.images_per_prompt, options.seed), subject);

    CurveReport curve;
    curve.subject_id = subject;
    for (const auto& [ctx, archive] : entries) {
        for (const EvaluationPlan* plan : {&train_plan, &test_plan}) {
            const GeneratedSet generated =
                run_generation(*plan, *archive, model, encoder, codec, options.generation);
            const EvaluationReport report = score(generated, *plan, contrastive, selfsup);
            CurveRow row;
            row.checkpoint_id = ctx.checkpoint_id;
            row.step = ctx.step;
            row.split = plan->split;
            row.count = report.count;
            row.text_image_sim = report.aggregate.text_image_sim;
            row.image_image_sim_contrastive = report.aggregate.image_image_sim_contrastive;
            row.image_image_sim_selfsup = report.aggregate.image_image_sim_selfsup;
            curve.rows.push_back(row);
        }
    }
    return curve;
}

ordered_json curve_to_json(const CurveReport& curve) {
    ordered_json rows = ordered_json::array();
    for (const CurveRow& r : curve.rows)
        rows.push_back(ordered_json{{"checkpoint", r.checkpoint_id},
                                    {"step", r.step},
                                    {"split", split_name(r.split)},
                                    {"count", r.count},
                                    {"text_image_sim", r.text_image_sim},
                                    {"image_image_sim_contrastive", r.image_image_sim_contrastive},
                                    {"image_image_sim_selfsup", r.image_image_sim_selfsup}});
    return ordered_json{{"subject", curve.subject_id}, {"rows", rows}};
}

void write_curve(const CurveReport& curve, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw MissingFileError("cannot write curve to " + path.string());
    out << curve_to_json(curve).dump(2) << "\n";
}

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

}  // namespace

void write_curve_svg(const CurveReport& curve, const fs::path& path) {
    // Fixed layout: steps on x, similarity in [-1, 1] on y. Solid lines are
    // the train split, dashed the test split.
    constexpr double kW = 640, kH = 400;
    constexpr double kLeft = 60, kRight = 620, kTop = 20, kBottom = 360;

    int min_step = 0, max_step = 1;
    if (!curve.rows.empty()) {
        min_step = max_step = curve.rows.front().step;
        for (const CurveRow& r : curve.rows) {
            min_step = std::min(min_step, r.step);
            max_step = std::max(max_step, r.step);
        }
        if (max_step == min_step) max_step = min_step + 1;
    }
    const auto x_of = [&](int step) {
        return kLeft + (kRight - kLeft) * (step - min_step) / double(max_step - min_step);
    };
    const auto y_of = [&](double sim) { return kBottom - (kBottom - kTop) * (sim + 1.0) / 2.0; };

    struct Series {
        const char* label;
        const char* color;
        double CurveRow::* field;
    };
    const Series series[] = {
        {"text-image", "#1f77b4", &CurveRow::text_image_sim},
        {"image-image (contrastive)", "#d62728", &CurveRow::image_image_sim_contrastive},
        {"image-image (self-sup)", "#2ca02c", &CurveRow::image_image_sim_selfsup},
    };

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw MissingFileError("cannot write plot to " + path.string());
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
        << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
    out << "<rect width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n";
    // Axes and horizontal guides at -1, 0, 1.
    out << "<line x1=\"" << kLeft << "\" y1=\"" << kBottom << "\" x2=\"" << kRight << "\" y2=\""
        << kBottom << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\""
        << kBottom << "\" stroke=\"black\"/>\n";
    for (double guide : {-1.0, 0.0, 1.0}) {
        out << "<line x1=\"" << kLeft << "\" y1=\"" << fmt(y_of(guide)) << "\" x2=\"" << kRight
            << "\" y2=\"" << fmt(y_of(guide)) << "\" stroke=\"#cccccc\" stroke-dasharray=\"2,4\"/>\n";
        out << "<text x=\"" << kLeft - 8 << "\" y=\"" << fmt(y_of(guide) + 4)
            << "\" font-size=\"12\" text-anchor=\"end\">" << fmt(guide) << "</text>\n";
    }
    out << "<text x=\"" << (kLeft + kRight) / 2 << "\" y=\"" << kH - 10
        << "\" font-size=\"12\" text-anchor=\"middle\">training step</text>\n";

    for (EvalSplit split : {EvalSplit::kTrain, EvalSplit::kTest}) {
        for (const Series& s : series) {
            std::string points;
            for (const CurveRow& r : curve.rows) {
                if (r.split != split) continue;
                if (!points.empty()) points += " ";
                points += fmt(x_of(r.step)) + "," + fmt(y_of(r.*(s.field)));
            }
            if (points.empty()) continue;
            out << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\"";
            if (split == EvalSplit::kTest) out << " stroke-dasharray=\"6,3\"";
            out << " points=\"" << points << "\"/>\n";
        }
    }
    // Legend.
    double ly = kTop + 10;
    for (const Series& s : series) {
        out << "<line x1=\"" << kLeft + 10 << "\" y1=\"" << fmt(ly) << "\" x2=\"" << kLeft + 40
            << "\" y2=\"" << fmt(ly) << "\" stroke=\"" << s.color << "\" stroke-width=\"1.5\"/>\n";
        out << "<text x=\"" << kLeft + 46 << "\" y=\"" << fmt(ly + 4) << "\" font-size=\"12\">"
            << s.label << "</text>\n";
        ly += 16;
    }
    out << "<text x=\"" << kLeft + 10 << "\" y=\"" << fmt(ly + 4)
        << "\" font-size=\"12\">solid = train split, dashed = test split</text>\n";
    out << "</svg>\n";
}

}  // namespace personalize
