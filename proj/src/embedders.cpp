#include "personalize/embedders.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include "personalize/errors.hpp"
#include "personalize/rng.hpp"

namespace personalize {

std::string method_name(Method m) { return m == Method::kTI ? "ti" : "neti"; }

Method method_from_name(const std::string& s) {
    if (s == "ti") return Method::kTI;
    if (s == "neti") return Method::kNeTI;
    throw UsageError("unknown method (want ti|neti): " + s);
}

std::vector<std::string> tokenize_prompt(const std::string& prompt) {
    static const std::string kStrip = ".,!?;:\"'()";
    std::vector<std::string> tokens;
    size_t i = 0;
    while (i < prompt.size()) {
        while (i < prompt.size() && std::isspace(static_cast<unsigned char>(prompt[i]))) ++i;
        size_t j = i;
        while (j < prompt.size() && !std::isspace(static_cast<unsigned char>(prompt[j]))) ++j;
        if (j > i) {
            std::string tok = prompt.substr(i, j - i);
            size_t b = 0, e = tok.size();
            while (b < e && kStrip.find(tok[b]) != std::string::npos) ++b;
            while (e > b && kStrip.find(tok[e - 1]) != std::string::npos) --e;
            std::string word = tok.substr(b, e - b);
            if (word == kSubjectToken || word == kAttractorToken) {
                tokens.push_back(word);
            } else {
                for (char& c : word)
                    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
                if (!word.empty()) tokens.push_back(word);
            }
        }
        i = j;
    }
    return tokens;
}

namespace {

// Hash-seeded Gaussian word vector with variance 1/d.
Tensor hashed_embedding(const std::string& word, int d, uint64_t seed) {
    Tensor v = Tensor::zeros({d});
    Rng r(split_seed(seed, hash_string(word)));
    double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto& x : v.data) x = r.gaussian() * scale;
    return v;
}

Tensor random_matrix(int rows, int cols, uint64_t seed, uint64_t tag, double scale) {
    Tensor m = Tensor::zeros({rows, cols});
    Rng r(split_seed(seed, tag));
    for (auto& x : m.data) x = r.gaussian() * scale;
    return m;
}

const std::set<std::string>& toy_vocabulary() {
    static const std::set<std::string> vocab = {
        // articles, prepositions, misc glue
        "a", "an", "the", "of", "in", "on", "my", "one", "with", "and", "at", "to",
        // training template adjectives/nouns
        "photo", "rendering", "rendition", "clean", "dirty", "dark", "cool", "bright",
        "cropped", "good", "nice", "close-up",
        // synthetic caption words
        "picture", "front", "background", "shown", "against", "scene", "studio", "over",
        "surface", "image", "placed", "backdrop", "snapshot", "resting", "captured",
        "centered", "view", "before", "above", "plain", "gradient", "striped", "checkered",
        // evaluation prompt words
        "colorful", "graffiti", "beach",
        // supercategories: synthetic shapes and a few common subjects
        "square", "circle", "triangle", "diamond", "cross", "ring", "dog", "cat", "mug",
        "chair", "toy", "car", "clock", "boot", "backpack", "vase", "bowl", "teapot",
        "plant", "lamp", "bottle",
        // sentinel
        "<unk>",
    };
    return vocab;
}

}  // namespace

ToyTextEncoder::ToyTextEncoder(int d, uint64_t seed, int context_length)
    : d_(d), context_length_(context_length), seed_(seed) {
    double s = 1.0 / std::sqrt(static_cast<double>(d));
    wq_ = random_matrix(d, d, seed, 11, s);
    wk_ = random_matrix(d, d, seed, 12, s);
    wv_ = random_matrix(d, d, seed, 13, s);
    wo_ = random_matrix(d, d, seed, 14, s);
    w1_ = random_matrix(d, 2 * d, seed, 15, s);
    w2_ = random_matrix(2 * d, d, seed, 16, s);
}

bool ToyTextEncoder::knows(const std::string& word) const {
    return toy_vocabulary().count(word) > 0;
}

Tensor ToyTextEncoder::word_embedding(const std::string& word) const {
    return hashed_embedding(knows(word) ? word : "<unk>", d_, seed_);
}

ad::Var ToyTextEncoder::encode(ad::Tape& tape, ad::Var sequence) const {
    const Tensor& sv = sequence.value();
    if (sv.ndim() != 2 || sv.shape[1] != d_)
        throw ShapeError("encode: expected (n," + std::to_string(d_) + ") sequence");
    int n = sv.shape[0];

    Tensor pos = Tensor::zeros({n, d_});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d_; ++j) {
            double rate = std::pow(10000.0, -static_cast<double>(j / 2 * 2) / d_);
            pos.at2(i, j) = (j % 2 == 0) ? std::sin(i * rate) : std::cos(i * rate);
        }

    ad::Var h = tape.add(sequence, tape.constant(pos));
    ad::Var q = tape.matmul(h, tape.constant(wq_));
    ad::Var k = tape.matmul(h, tape.constant(wk_));
    ad::Var v = tape.matmul(h, tape.constant(wv_));
    ad::Var scores = tape.scale(tape.matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(d_)));
    ad::Var attn = tape.matmul(tape.matmul(tape.softmax_rows(scores), v), tape.constant(wo_));
    ad::Var h2 = tape.add(h, attn);
    ad::Var mlp = tape.matmul(tape.silu(tape.matmul(h2, tape.constant(w1_))), tape.constant(w2_));
    return tape.add(h2, mlp);
}

Tensor IdentityTextEncoder::word_embedding(const std::string& word) const {
    return hashed_embedding(word, d_, seed_);
}

const Tensor& TokenTable::attractor(const std::string& image_id) const {
    for (const auto& [id, v] : attractor_embeddings)
        if (id == image_id) return v;
    throw UnknownTokenError("no attractor registered for image: " + image_id);
}

Tensor* TokenTable::find_attractor(const std::string& image_id) {
    for (auto& [id, v] : attractor_embeddings)
        if (id == image_id) return &v;
    return nullptr;
}

bool TokenTable::all_finite() const {
    if (!subject_embedding.all_finite()) return false;
    for (const auto& [id, v] : attractor_embeddings)
        if (!v.all_finite()) return false;
    return true;
}

TokenTable register_tokens(const SubjectRecord& subject, int d, TokenInit init,
                           const TextEncoder& encoder, uint64_t seed) {
    TokenTable table;
    table.d = d;
    table.subject_id = subject.subject_id;

    if (init == TokenInit::kSupercategoryWord) {
        if (!encoder.knows(subject.supercategory))
            throw InitError("supercategory word not in encoder vocabulary: " +
                            subject.supercategory);
        if (encoder.dim() != d)
            throw InitError("supercategory init requires d == encoder dimension");
        table.subject_embedding = encoder.word_embedding(subject.supercategory);
    } else {
        Tensor v = Tensor::zeros({d});
        Rng r(split_seed(seed, hash_string(subject.subject_id) ^ 0x51ULL));
        double scale = 1.0 / std::sqrt(static_cast<double>(d));
        for (auto& x : v.data) x = r.gaussian() * scale;
        table.subject_embedding = std::move(v);
    }

    bool word_init = encoder.dim() == d && encoder.knows("background");
    Tensor bg = word_init ? encoder.word_embedding("background") : Tensor::zeros({d});
    for (const auto& rec : subject.train_images) {
        Tensor a = bg;
        Rng r(split_seed(seed, hash_string(rec.image) ^ 0xA7ULL));
        double noise = word_init ? 1e-3 : 1.0 / std::sqrt(static_cast<double>(d));
        for (auto& x : a.data) x += r.gaussian() * noise;
        table.attractor_embeddings.emplace_back(rec.image, std::move(a));
    }
    return table;
}

int NeTIEmbedder::input_dim() const { return 8 + L; }

Tensor NeTIEmbedder::encode_input(int t, int l) const {
    if (t < 0 || t >= T) throw IndexError("neti: timestep out of range: " + std::to_string(t));
    if (l < 0 || l >= L) throw IndexError("neti: layer out of range: " + std::to_string(l));
    Tensor f = Tensor::zeros({input_dim()});
    double tn = T > 1 ? static_cast<double>(t) / (T - 1) : 0.0;
    for (int k = 0; k < 4; ++k) {
        double angle = tn * M_PI * std::pow(2.0, k);
        f.data[2 * k] = std::sin(angle);
        f.data[2 * k + 1] = std::cos(angle);
    }
    f.data[8 + l] = 1.0;
    return f;
}

NeTIEmbedder NeTIEmbedder::init(int d, int T, int L, int hidden, uint64_t seed) {
    if (d < 1 || T < 1 || L < 1 || hidden < 1) throw SpecError("neti: dimensions must be >= 1");
    NeTIEmbedder e;
    e.d = d;
    e.T = T;
    e.L = L;
    e.hidden = hidden;
    int in = e.input_dim();
    e.w1 = random_matrix(hidden, in, seed, 21, 1.0 / std::sqrt(static_cast<double>(in)));
    e.b1 = Tensor::zeros({hidden});
    e.w2 = random_matrix(d, hidden, seed, 22, 1.0 / std::sqrt(static_cast<double>(hidden)));
    e.b2 = Tensor::zeros({d});
    return e;
}

NeTIEmbedder NeTIEmbedder::constant(int d, int T, int L, const Tensor& v) {
    if (v.size() != d) throw DimensionError("neti constant: vector size must equal d");
    NeTIEmbedder e;
    e.d = d;
    e.T = T;
    e.L = L;
    e.hidden = 1;
    e.w1 = Tensor::zeros({e.hidden, e.input_dim()});
    e.b1 = Tensor::zeros({e.hidden});
    e.w2 = Tensor::zeros({d, e.hidden});
    e.b2 = Tensor(std::vector<int>{d}, v.data);
    return e;
}

ad::Var neti_forward(ad::Tape& tape, const NeTIEmbedder& spec, const NeTIParamVars& params,
                     int t, int l) {
    Tensor f = spec.encode_input(t, l);
    ad::Var fin = tape.constant(Tensor({spec.input_dim(), 1}, f.data));
    ad::Var h = tape.silu(
        tape.add(tape.matmul(params.w1, fin), tape.reshape(params.b1, {spec.hidden, 1})));
    ad::Var out = tape.add(tape.matmul(params.w2, h), tape.reshape(params.b2, {spec.d, 1}));
    return tape.reshape(out, {spec.d});
}

Tensor neti_forward(const NeTIEmbedder& embedder, int t, int l) {
    ad::Tape tape(false);
    NeTIParamVars params{tape.constant(embedder.w1), tape.constant(embedder.b1),
                         tape.constant(embedder.w2), tape.constant(embedder.b2)};
    return neti_forward(tape, embedder, params, t, l).value();
}

ConditioningBundle embed_prompt(ad::Tape& tape, const PromptEmbedder& pe,
                                const std::string& prompt, int t,
                                const std::string& image_id) {
    if (!pe.encoder || !pe.table) throw SpecError("embed_prompt: encoder and table required");
    const TextEncoder& enc = *pe.encoder;
    if (pe.table->d != enc.dim())
        throw InitError("token table dimension " + std::to_string(pe.table->d) +
                        " does not match encoder dimension " + std::to_string(enc.dim()));

    std::vector<std::string> tokens = tokenize_prompt(prompt);
    if (tokens.empty()) throw ConditioningError("empty prompt");
    if (static_cast<int>(tokens.size()) > enc.context_length())
        throw ConditioningError("prompt exceeds context length: " + prompt);

    ConditioningBundle bundle;
    bundle.method = pe.method;
    bundle.n = static_cast<int>(tokens.size());
    bundle.d = enc.dim();

    for (size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] != kSubjectToken && tokens[i] != kAttractorToken) continue;
        if (bundle.token_positions.count(tokens[i]))
            throw ConditioningError("pseudo-token appears more than once: " + tokens[i]);
        bundle.token_positions[tokens[i]] = static_cast<int>(i);
    }

    ad::Var attractor_row;
    if (bundle.token_positions.count(kAttractorToken)) {
        if (image_id.empty())
            throw UnknownTokenError("<A*> present but no image_id supplied");
        auto it = pe.attractor_vars.find(image_id);
        if (it != pe.attractor_vars.end() && it->second.valid()) {
            attractor_row = it->second;
        } else {
            attractor_row = tape.constant(pe.table->attractor(image_id));
        }
    }

    auto word_rows = [&](int layer) {
        std::vector<ad::Var> rows;
        rows.reserve(tokens.size());
        for (const auto& tok : tokens) {
            if (tok == kSubjectToken) {
                if (pe.method == Method::kNeTI) {
                    if (!pe.neti) throw SpecError("embed_prompt: NeTI method without embedder");
                    NeTIParamVars params = pe.neti_vars;
                    if (!params.w1.valid()) {
                        params.w1 = tape.constant(pe.neti->w1);
                        params.b1 = tape.constant(pe.neti->b1);
                        params.w2 = tape.constant(pe.neti->w2);
                        params.b2 = tape.constant(pe.neti->b2);
                    }
                    rows.push_back(neti_forward(tape, *pe.neti, params, t, layer));
                } else {
                    rows.push_back(pe.subject_var.valid()
                                       ? pe.subject_var
                                       : tape.constant(pe.table->subject_embedding));
                }
            } else if (tok == kAttractorToken) {
                rows.push_back(attractor_row);
            } else {
                rows.push_back(tape.constant(enc.word_embedding(tok)));
            }
        }
        return tape.concat_rows(rows);
    };

    if (pe.method == Method::kTI) {
        bundle.sequences.push_back(enc.encode(tape, word_rows(0)));
    } else {
        if (!pe.neti) throw SpecError("embed_prompt: NeTI method without embedder");
        for (int l = 0; l < pe.neti->L; ++l)
            bundle.sequences.push_back(enc.encode(tape, word_rows(l)));
    }
    return bundle;
}

ad::Var extract_contextual(const ConditioningBundle& bundle, const std::string& token,
                           int layer) {
    auto it = bundle.token_positions.find(token);
    if (it == bundle.token_positions.end())
        throw UnknownTokenError("token not present in prompt: " + token);
    size_t seq_index = 0;
    if (bundle.method == Method::kNeTI) {
        if (layer < 0 || layer >= static_cast<int>(bundle.sequences.size()))
            throw IndexError("layer out of range: " + std::to_string(layer));
        seq_index = static_cast<size_t>(layer);
    }
    ad::Var seq = bundle.sequences[seq_index];
    return seq.tape->row(seq, it->second);
}

Archive make_token_archive(const TokenTable& table, Method method, const NeTIEmbedder* neti) {
    Archive a;
    a.meta["kind"] = "token_table";
    a.meta["method"] = method_name(method);
    a.meta["d"] = table.d;
    a.meta["subject_id"] = table.subject_id;
    a.put("v_star", table.subject_embedding);
    nlohmann::ordered_json ids = nlohmann::ordered_json::array();
    for (const auto& [id, v] : table.attractor_embeddings) {
        ids.push_back(id);
        a.put("attractor/" + id, v);
    }
    a.meta["attractor_ids"] = ids;
    if (neti) {
        a.meta["neti"] = {{"T", neti->T}, {"L", neti->L}, {"hidden", neti->hidden}};
        a.put("neti/w1", neti->w1);
        a.put("neti/b1", neti->b1);
        a.put("neti/w2", neti->w2);
        a.put("neti/b2", neti->b2);
    }
    return a;
}

LoadedTokens load_token_archive(const Archive& archive) {
    if (!archive.meta.contains("kind") || archive.meta["kind"] != "token_table")
        throw FormatError("archive is not a token table");
    LoadedTokens out;
    out.method = method_from_name(archive.meta["method"].get<std::string>());
    out.table.d = archive.meta["d"].get<int>();
    out.table.subject_id = archive.meta.value("subject_id", std::string());
    out.table.subject_embedding = archive.get("v_star");
    for (const auto& id : archive.meta["attractor_ids"])
        out.table.attractor_embeddings.emplace_back(id.get<std::string>(),
                                                    archive.get("attractor/" + id.get<std::string>()));
    if (archive.meta.contains("neti")) {
        out.has_neti = true;
        out.neti.d = out.table.d;
        out.neti.T = archive.meta["neti"]["T"].get<int>();
        out.neti.L = archive.meta["neti"]["L"].get<int>();
        out.neti.hidden = archive.meta["neti"]["hidden"].get<int>();
        out.neti.w1 = archive.get("neti/w1");
        out.neti.b1 = archive.get("neti/b1");
        out.neti.w2 = archive.get("neti/w2");
        out.neti.b2 = archive.get("neti/b2");
    }
    return out;
}

}  // namespace personalize
