#include "personalize/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "personalize/errors.hpp"
#include "personalize/rng.hpp"

namespace personalize {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::filesystem::path DatasetManifest::resolve(const std::string& rel) const {
    fs::path r(root);
    if (r.is_relative()) r = base / r;
    return (r / rel).lexically_normal();
}

const SubjectRecord& DatasetManifest::subject(const std::string& id) const {
    for (const auto& s : subjects)
        if (s.subject_id == id) return s;
    throw IndexError("no such subject in manifest: " + id);
}

Profile parse_profile(const std::string& s) {
    if (s == "full") return Profile::kFull;
    if (s == "toy") return Profile::kToy;
    throw UsageError("unknown profile (want full|toy): " + s);
}

namespace {

std::string require_string(const ordered_json& j, const char* key, const std::string& where) {
    if (!j.contains(key) || !j[key].is_string())
        throw ParseError("manifest: missing string field '" + std::string(key) + "' in " + where);
    return j[key].get<std::string>();
}

const ordered_json& require_array(const ordered_json& j, const char* key,
                                  const std::string& where) {
    if (!j.contains(key) || !j[key].is_array())
        throw ParseError("manifest: missing array field '" + std::string(key) + "' in " + where);
    return j[key];
}

ImageRecord parse_image_record(const ordered_json& j, const std::string& where,
                               bool want_captions) {
    if (!j.is_object()) throw ParseError("manifest: image entry is not an object in " + where);
    ImageRecord rec;
    rec.image = require_string(j, "image", where);
    if (j.contains("mask")) {
        if (!j["mask"].is_string()) throw ParseError("manifest: non-string mask in " + where);
        rec.mask = j["mask"].get<std::string>();
    }
    if (j.contains("captions")) {
        for (const auto& c : require_array(j, "captions", where)) {
            if (!c.is_string()) throw ParseError("manifest: non-string caption in " + where);
            rec.captions.push_back(c.get<std::string>());
        }
    } else if (want_captions) {
        rec.captions = {};
    }
    return rec;
}

// Lowercased alphanumeric words of a caption, for the leak check.
std::vector<std::string> caption_words(const std::string& caption) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : caption) {
        if (std::isalnum(static_cast<unsigned char>(ch))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        } else if (!cur.empty()) {
            words.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}

std::string lowercase(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

int count_placeholders(const std::string& s) {
    int n = 0;
    for (size_t pos = 0; (pos = s.find("{}", pos)) != std::string::npos; pos += 2) ++n;
    return n;
}

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw MissingFileError("cannot open manifest: " + path.string());
    ordered_json j;
    try {
        j = ordered_json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("manifest is not valid JSON: " + path.string() + ": " + e.what());
    }
    if (!j.is_object()) throw ParseError("manifest: top level must be an object");
    if (!j.contains("schema_version") || !j["schema_version"].is_number_integer())
        throw ParseError("manifest: missing integer schema_version");

    DatasetManifest m;
    m.schema_version = j["schema_version"].get<int>();
    if (m.schema_version != 1)
        throw ParseError("manifest: unsupported schema_version " +
                         std::to_string(m.schema_version));
    m.root = require_string(j, "root", "top level");
    m.base = path.has_parent_path() ? path.parent_path() : fs::path(".");

    for (const auto& js : require_array(j, "subjects", "top level")) {
        SubjectRecord s;
        s.subject_id = require_string(js, "id", "subject");
        s.supercategory = require_string(js, "supercategory", "subject " + s.subject_id);
        for (const auto& jt : require_array(js, "train", "subject " + s.subject_id))
            s.train_images.push_back(parse_image_record(jt, "subject " + s.subject_id, false));
        for (const auto& jt : require_array(js, "test", "subject " + s.subject_id))
            s.test_images.push_back(parse_image_record(jt, "subject " + s.subject_id, true));
        m.subjects.push_back(std::move(s));
    }

    for (const auto& s : m.subjects) {
        auto check = [&](const std::string& rel) {
            if (rel.empty()) return;
            fs::path p = m.resolve(rel);
            if (!fs::exists(p))
                throw MissingFileError("manifest references missing file: " + p.string());
        };
        for (const auto& r : s.train_images) {
            check(r.image);
            check(r.mask);
        }
        for (const auto& r : s.test_images) {
            check(r.image);
            check(r.mask);
        }
    }
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    ordered_json j;
    j["schema_version"] = manifest.schema_version;
    j["root"] = manifest.root;
    j["subjects"] = ordered_json::array();
    for (const auto& s : manifest.subjects) {
        ordered_json js;
        js["id"] = s.subject_id;
        js["supercategory"] = s.supercategory;
        js["train"] = ordered_json::array();
        for (const auto& r : s.train_images) {
            ordered_json jr;
            jr["image"] = r.image;
            if (!r.mask.empty()) jr["mask"] = r.mask;
            js["train"].push_back(jr);
        }
        js["test"] = ordered_json::array();
        for (const auto& r : s.test_images) {
            ordered_json jr;
            jr["image"] = r.image;
            if (!r.mask.empty()) jr["mask"] = r.mask;
            jr["captions"] = r.captions;
            js["test"].push_back(jr);
        }
        j["subjects"].push_back(js);
    }
    std::ofstream f(path);
    if (!f) throw DataError("cannot open for writing: " + path.string());
    f << j.dump(2) << "\n";
    if (!f) throw DataError("write failed: " + path.string());
}

ValidationReport validate_manifest(const DatasetManifest& manifest, Profile profile) {
    ValidationReport report;
    auto flag = [&](const std::string& msg) { report.violations.push_back(msg); };

    if (profile == Profile::kFull && manifest.subjects.size() != 20)
        flag("full profile requires 20 subjects, found " +
             std::to_string(manifest.subjects.size()));

    std::set<std::string> ids;
    for (const auto& s : manifest.subjects) {
        if (!ids.insert(s.subject_id).second)
            flag("duplicate subject id: " + s.subject_id);

        if (s.supercategory.empty() ||
            s.supercategory.find_first_of(" \t\n\r") != std::string::npos)
            flag("subject " + s.subject_id + ": supercategory must be a single token, got '" +
                 s.supercategory + "'");

        if (profile == Profile::kFull) {
            if (s.train_images.size() != 5)
                flag("subject " + s.subject_id + ": full profile requires 5 train images, found " +
                     std::to_string(s.train_images.size()));
            if (s.test_images.size() != 10)
                flag("subject " + s.subject_id + ": full profile requires 10 test images, found " +
                     std::to_string(s.test_images.size()));
        }

        std::set<std::string> train_files;
        for (const auto& r : s.train_images) train_files.insert(r.image);
        for (const auto& r : s.test_images)
            if (train_files.count(r.image))
                flag("subject " + s.subject_id + ": image in both splits: " + r.image);

        std::string id_lc = lowercase(s.subject_id);
        std::string super_lc = lowercase(s.supercategory);

        for (const auto& r : s.train_images) {
            if (r.mask.empty()) {
                flag("subject " + s.subject_id + ": train image without mask: " + r.image);
                continue;
            }
            try {
                Image im = read_image(manifest.resolve(r.image));
                Mask mk = read_mask(manifest.resolve(r.mask));
                if (mk.height != im.height || mk.width != im.width)
                    flag("subject " + s.subject_id + ": mask resolution differs from image: " +
                         r.mask);
            } catch (const Error& e) {
                flag("subject " + s.subject_id + ": " + e.what());
            }
        }

        for (const auto& r : s.test_images) {
            size_t want_captions = profile == Profile::kFull ? 10 : 1;
            if (r.captions.size() < want_captions ||
                (profile == Profile::kFull && r.captions.size() != 10))
                flag("subject " + s.subject_id + ": test image " + r.image + " has " +
                     std::to_string(r.captions.size()) + " captions, profile requires " +
                     (profile == Profile::kFull ? "exactly 10" : "at least 1"));
            std::set<std::string> seen;
            for (const auto& c : r.captions) {
                if (!seen.insert(c).second)
                    flag("subject " + s.subject_id + ": duplicate caption: " + c);
                int slots = count_placeholders(c);
                if (slots != 1)
                    flag("subject " + s.subject_id + ": caption has " + std::to_string(slots) +
                         " placeholders (want 1): " + c);
                for (const auto& w : caption_words(c))
                    if (w == id_lc || w == super_lc)
                        flag("subject " + s.subject_id + ": caption leaks subject word '" + w +
                             "': " + c);
            }
        }
    }
    return report;
}

std::string fill_caption(const std::string& caption, const std::string& replacement) {
    int slots = count_placeholders(caption);
    if (slots != 1)
        throw PlaceholderError("caption must contain exactly one {} placeholder, found " +
                               std::to_string(slots) + ": " + caption);
    std::string filled = caption;
    filled.replace(filled.find("{}"), 2, replacement);

    std::string out;
    bool in_space = true;  // swallow leading whitespace
    for (char ch : filled) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!in_space) out.push_back(' ');
            in_space = true;
        } else {
            out.push_back(ch);
            in_space = false;
        }
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

MaskPair ingest_mask(const Tensor& mask_image, double threshold) {
    if (mask_image.ndim() != 2)
        throw ShapeError("ingest_mask: expected (H,W) input, got " +
                         shape_string(mask_image.shape));
    if (!(threshold > 0.0 && threshold < 1.0))
        throw SpecError("ingest_mask: threshold must lie in (0,1)");
    MaskPair pair;
    pair.subject_mask = Mask::zeros(mask_image.shape[0], mask_image.shape[1]);
    for (int y = 0; y < mask_image.shape[0]; ++y)
        for (int x = 0; x < mask_image.shape[1]; ++x)
            pair.subject_mask.at(y, x) = mask_image.at2(y, x) >= threshold ? 1 : 0;
    pair.background_mask = pair.subject_mask.complement();
    return pair;
}

// ---- synthesis ----

namespace synth {

namespace {

constexpr int kNumShapes = 6;

constexpr std::array<std::array<double, 3>, 8> kVividPalette{{
    {0.85, 0.10, 0.10},
    {0.10, 0.75, 0.15},
    {0.15, 0.20, 0.90},
    {0.95, 0.80, 0.05},
    {0.85, 0.15, 0.80},
    {0.05, 0.80, 0.85},
    {0.95, 0.55, 0.10},
    {0.60, 0.20, 0.90},
}};

const char* kBackgroundWord[5] = {"plain", "gradient", "gradient", "striped", "checkered"};

const char* kCaptionTemplates[10] = {
    "a photo of {} on a %s backdrop.",
    "a picture of {} in front of a %s background.",
    "{} shown against a %s scene.",
    "a studio photo of {} over a %s surface.",
    "a close-up photo of {} with a %s background.",
    "an image of {} placed on a %s backdrop.",
    "a snapshot of {} resting on a %s surface.",
    "{} captured against a %s background.",
    "a centered view of {} before a %s scene.",
    "a bright photo of {} above a %s surface.",
};

std::string expand_template(const char* tmpl, const std::string& word) {
    std::string s(tmpl);
    size_t pos = s.find("%s");
    s.replace(pos, 2, word);
    return s;
}

}  // namespace

std::string shape_name(int shape) {
    static const char* names[kNumShapes] = {"square", "circle", "triangle",
                                            "diamond", "cross",  "ring"};
    if (shape < 0 || shape >= kNumShapes) throw IndexError("shape index out of range");
    return names[shape];
}

Composition composition_for(const SynthSpec& spec, int subject_index, int image_index) {
    Composition c;
    c.shape = subject_index % kNumShapes;

    // Appearance is a subject property: same color in every frame.
    Rng subject_rng(split_seed(spec.seed, 0x5u + static_cast<uint64_t>(subject_index)));
    const auto& base = kVividPalette[subject_index % kVividPalette.size()];
    for (int ch = 0; ch < 3; ++ch) {
        double v = base[ch] + (subject_rng.uniform() - 0.5) * 0.1;
        c.subject_color[ch] = std::clamp(v, 0.05, 0.98);
    }

    Rng r(split_seed(spec.seed, (static_cast<uint64_t>(subject_index) << 24) + 0x1000u +
                                    static_cast<uint64_t>(image_index)));
    double size = spec.image_size;
    c.radius = size * (0.20 + 0.125 * r.uniform());
    double lo = c.radius + 0.5;
    double hi = size - 1.5 - c.radius;
    c.cx = lo + (hi - lo) * r.uniform();
    c.cy = lo + (hi - lo) * r.uniform();

    c.background_kind = r.uniform_int(0, 4);
    for (int ch = 0; ch < 3; ++ch) c.bg_color_a[ch] = 0.35 + 0.30 * r.uniform();
    for (int ch = 0; ch < 3; ++ch) c.bg_color_b[ch] = 0.35 + 0.30 * r.uniform();
    c.bg_period = r.uniform_int(2, std::max(3, spec.image_size / 4));
    c.caption_offset = r.uniform_int(0, 9);
    return c;
}

bool subject_covers(const Composition& c, int y, int x) {
    double dx = x - c.cx;
    double dy = y - c.cy;
    double r = c.radius;
    switch (c.shape) {
        case 0: return std::abs(dx) <= r && std::abs(dy) <= r;
        case 1: return dx * dx + dy * dy <= r * r;
        case 2: return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2.0;
        case 3: return std::abs(dx) + std::abs(dy) <= r;
        case 4:
            return (std::abs(dx) <= r / 3.0 && std::abs(dy) <= r) ||
                   (std::abs(dy) <= r / 3.0 && std::abs(dx) <= r);
        case 5: {
            double d2 = dx * dx + dy * dy;
            double inner = std::max(0.0, r - 1.5);
            return d2 <= r * r && d2 >= inner * inner;
        }
        default: throw IndexError("shape index out of range");
    }
}

Mask subject_mask(const Composition& c, int size) {
    Mask m = Mask::zeros(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) m.at(y, x) = subject_covers(c, y, x) ? 1 : 0;
    return m;
}

Image render_background(const Composition& c, int size) {
    Image im = Image::zeros(3, size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double t = 0.0;
            bool use_b = false;
            switch (c.background_kind) {
                case 0: t = 0.0; break;
                case 1: t = size > 1 ? static_cast<double>(x) / (size - 1) : 0.0; break;
                case 2: t = size > 1 ? static_cast<double>(y) / (size - 1) : 0.0; break;
                case 3: use_b = (x / c.bg_period) % 2 == 1; break;
                case 4: use_b = ((x / c.bg_period) + (y / c.bg_period)) % 2 == 1; break;
                default: throw IndexError("background kind out of range");
            }
            for (int ch = 0; ch < 3; ++ch) {
                double v;
                if (c.background_kind <= 2)
                    v = c.bg_color_a[ch] + t * (c.bg_color_b[ch] - c.bg_color_a[ch]);
                else
                    v = use_b ? c.bg_color_b[ch] : c.bg_color_a[ch];
                im.at(ch, y, x) = v;
            }
        }
    return im;
}

Image render_subject_layer(const Composition& c, int size) {
    Image im = Image::zeros(3, size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            if (subject_covers(c, y, x))
                for (int ch = 0; ch < 3; ++ch) im.at(ch, y, x) = c.subject_color[ch];
    return im;
}

Image compose(const Composition& c, int size) {
    Image im = render_background(c, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            if (subject_covers(c, y, x))
                for (int ch = 0; ch < 3; ++ch) im.at(ch, y, x) = c.subject_color[ch];
    return im;
}

std::vector<std::string> captions_for(const Composition& c, int count) {
    if (count < 1 || count > 10)
        throw SpecError("captions_for: count must be in [1,10], got " + std::to_string(count));
    std::vector<std::string> out;
    std::string word = kBackgroundWord[c.background_kind];
    for (int i = 0; i < count; ++i)
        out.push_back(expand_template(kCaptionTemplates[(c.caption_offset + i) % 10], word));
    return out;
}

}  // namespace synth

DatasetManifest synth_toy_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir) {
    if (spec.n_subjects < 1 || spec.images_per_subject < 1 ||
        spec.captions_per_test_image < 1)
        throw SpecError("synth_toy_dataset: counts must be positive");
    if (spec.image_size < 8) throw SpecError("synth_toy_dataset: image_size must be >= 8");
    if (!(spec.train_fraction >= 0.0 && spec.train_fraction <= 1.0))
        throw SpecError("synth_toy_dataset: train_fraction must lie in [0,1]");

    int n_train = static_cast<int>(std::llround(spec.images_per_subject * spec.train_fraction));
    n_train = std::clamp(n_train, 1, spec.images_per_subject);
    if (spec.images_per_subject >= 2) n_train = std::min(n_train, spec.images_per_subject - 1);

    fs::create_directories(out_dir);

    DatasetManifest m;
    m.schema_version = 1;
    m.root = ".";
    m.base = out_dir;

    for (int si = 0; si < spec.n_subjects; ++si) {
        std::ostringstream idss;
        idss << "subject" << std::setfill('0') << std::setw(2) << si;
        SubjectRecord s;
        s.subject_id = idss.str();
        s.supercategory = synth::shape_name(si % 6);
        fs::create_directories(out_dir / s.subject_id);

        for (int ii = 0; ii < spec.images_per_subject; ++ii) {
            synth::Composition c = synth::composition_for(spec, si, ii);
            Image frame = synth::compose(c, spec.image_size);
            Mask mask = spec.full_frame_masks ? Mask::ones(spec.image_size, spec.image_size)
                                              : synth::subject_mask(c, spec.image_size);
            if (mask.count() == 0)
                throw InitError("synth_toy_dataset: empty subject mask (internal)");

            std::ostringstream base;
            base << "img_" << std::setfill('0') << std::setw(3) << ii;
            std::string image_rel = s.subject_id + "/" + base.str() + ".ppm";
            write_ppm(out_dir / s.subject_id / (base.str() + ".ppm"), frame);

            ImageRecord rec;
            rec.image = image_rel;
            if (ii < n_train) {
                std::string mask_rel = s.subject_id + "/" + base.str() + "_mask.pgm";
                write_mask_pgm(out_dir / s.subject_id / (base.str() + "_mask.pgm"), mask);
                rec.mask = mask_rel;
                s.train_images.push_back(std::move(rec));
            } else {
                rec.captions = synth::captions_for(c, spec.captions_per_test_image);
                s.test_images.push_back(std::move(rec));
            }
        }
        m.subjects.push_back(std::move(s));
    }

    save_manifest(m, out_dir / "manifest.json");
    return m;
}

}  // namespace personalize
