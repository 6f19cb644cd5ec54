#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "personalize/image.hpp"
#include "personalize/tensor.hpp"

namespace personalize {

// One image entry. Paths are stored as written in the manifest (forward-slash,
// relative to the dataset root); resolve with DatasetManifest::resolve.
struct ImageRecord {
    std::string image;
    std::string mask;                   // empty = absent; required for train images
    std::vector<std::string> captions;  // test images only; each has one {} slot
};

struct SubjectRecord {
    std::string subject_id;
    std::string supercategory;  // single word token S, e.g. "dog"
    std::vector<ImageRecord> train_images;
    std::vector<ImageRecord> test_images;
};

struct DatasetManifest {
    int schema_version = 1;
    std::string root;  // relative roots resolve against the manifest's directory
    std::vector<SubjectRecord> subjects;

    std::filesystem::path base;  // directory the manifest was loaded from

    std::filesystem::path resolve(const std::string& rel) const;
    const SubjectRecord& subject(const std::string& id) const;  // IndexError if absent
};

// Complementary binary masks at image resolution.
struct MaskPair {
    Mask subject_mask;
    Mask background_mask;
};

struct ValidationReport {
    std::vector<std::string> violations;
    bool valid() const { return violations.empty(); }
};

enum class Profile { kFull, kToy };
Profile parse_profile(const std::string& s);  // "full" | "toy", else UsageError

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// Reports every violated invariant; never throws on bad data.
ValidationReport validate_manifest(const DatasetManifest& manifest, Profile profile);

// Substitutes the single {} slot and collapses whitespace runs.
std::string fill_caption(const std::string& caption, const std::string& replacement);

// Binarizes a grayscale (H,W) tensor in [0,1]: M_s = (value >= threshold).
MaskPair ingest_mask(const Tensor& mask_image, double threshold = 0.5);

// ---- synthetic toy datasets ----

struct SynthSpec {
    int n_subjects = 2;
    int images_per_subject = 15;
    double train_fraction = 1.0 / 3.0;
    int image_size = 16;
    uint64_t seed = 0;
    int captions_per_test_image = 3;
    // All-ones subject masks: every pixel belongs to the subject, so masked
    // subject training degenerates to the plain unmasked objective.
    bool full_frame_masks = false;
};

namespace synth {

// Everything that determines one rendered frame. Subject appearance (shape,
// color) is fixed per subject; placement and background vary per image.
struct Composition {
    int shape = 0;  // 0..5, see shape_name
    std::array<double, 3> subject_color{};
    double cx = 0, cy = 0, radius = 0;
    int background_kind = 0;  // 0 plain, 1/2 gradients, 3 stripes, 4 checker
    std::array<double, 3> bg_color_a{};
    std::array<double, 3> bg_color_b{};
    int bg_period = 4;
    int caption_offset = 0;
};

std::string shape_name(int shape);
Composition composition_for(const SynthSpec& spec, int subject_index, int image_index);
bool subject_covers(const Composition& c, int y, int x);
Mask subject_mask(const Composition& c, int size);
Image render_background(const Composition& c, int size);
Image render_subject_layer(const Composition& c, int size);  // subject over black
Image compose(const Composition& c, int size);
std::vector<std::string> captions_for(const Composition& c, int count);

}  // namespace synth

// Renders a dataset under out_dir (images, masks, manifest.json) and returns
// the manifest. Pure function of spec: identical spec -> identical bytes.
DatasetManifest synth_toy_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir);

}  // namespace personalize
