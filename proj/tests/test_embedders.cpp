#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <cmath>

#include "personalize/embedders.hpp"
#include "personalize/errors.hpp"
#include "personalize/rng.hpp"

using namespace personalize;
using ad::Tape;
using ad::Var;

namespace {

SubjectRecord make_subject(int n_train = 5, const std::string& supercategory = "dog") {
    SubjectRecord s;
    s.subject_id = "subject00";
    s.supercategory = supercategory;
    for (int i = 0; i < n_train; ++i) {
        ImageRecord r;
        r.image = "subject00/img_" + std::to_string(i) + ".ppm";
        r.mask = "subject00/img_" + std::to_string(i) + "_mask.pgm";
        s.train_images.push_back(r);
    }
    return s;
}

bool same_bits(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (size_t i = 0; i < a.data.size(); ++i)
        if (std::bit_cast<uint64_t>(a.data[i]) != std::bit_cast<uint64_t>(b.data[i]))
            return false;
    return true;
}

}  // namespace

TEST_CASE("tokenize_prompt lowercases, strips punctuation, keeps pseudo-tokens") {
    auto t = tokenize_prompt("A photo of <v*> in the <A*>.");
    REQUIRE(t.size() == 7);
    CHECK(t[0] == "a");
    CHECK(t[1] == "photo");
    CHECK(t[3] == "<v*>");
    CHECK(t[6] == "<A*>");
    CHECK(tokenize_prompt("  a close-up photo. ") ==
          std::vector<std::string>{"a", "close-up", "photo"});
    CHECK(tokenize_prompt("").empty());
}

TEST_CASE("register_tokens yields one subject vector and one attractor per train image") {
    ToyTextEncoder enc(16, 7);
    SubjectRecord s = make_subject(5);
    TokenTable table = register_tokens(s, 16, TokenInit::kSupercategoryWord, enc, 1);
    CHECK(table.d == 16);
    CHECK(table.subject_embedding.size() == 16);
    CHECK(table.attractor_embeddings.size() == 5);
    CHECK(table.all_finite());

    // supercategory init equals the encoder's word embedding
    CHECK(same_bits(table.subject_embedding, enc.word_embedding("dog")));

    // attractors: near the "background" word embedding but pairwise distinct
    Tensor bg = enc.word_embedding("background");
    for (const auto& [id, v] : table.attractor_embeddings) {
        double dist = 0;
        for (int i = 0; i < 16; ++i) dist += (v.data[i] - bg.data[i]) * (v.data[i] - bg.data[i]);
        CHECK(std::sqrt(dist) < 0.05);
        CHECK(std::sqrt(dist) > 0.0);
    }
    CHECK_FALSE(same_bits(table.attractor_embeddings[0].second,
                          table.attractor_embeddings[1].second));

    CHECK_THROWS_AS(table.attractor("missing.ppm"), UnknownTokenError);
}

TEST_CASE("register_tokens is deterministic and rejects unknown supercategories") {
    ToyTextEncoder enc(16, 7);
    SubjectRecord s = make_subject(3);
    TokenTable a = register_tokens(s, 16, TokenInit::kRandom, enc, 42);
    TokenTable b = register_tokens(s, 16, TokenInit::kRandom, enc, 42);
    CHECK(same_bits(a.subject_embedding, b.subject_embedding));
    for (size_t i = 0; i < a.attractor_embeddings.size(); ++i)
        CHECK(same_bits(a.attractor_embeddings[i].second, b.attractor_embeddings[i].second));

    TokenTable c = register_tokens(s, 16, TokenInit::kRandom, enc, 43);
    CHECK_FALSE(same_bits(a.subject_embedding, c.subject_embedding));

    SubjectRecord weird = make_subject(2, "zxqv");
    CHECK_THROWS_AS(register_tokens(weird, 16, TokenInit::kSupercategoryWord, enc, 1),
                    InitError);
}

TEST_CASE("embed_prompt injects v* at its recorded position (identity encoder)") {
    IdentityTextEncoder enc(8);
    SubjectRecord s = make_subject(2);
    TokenTable table = register_tokens(s, 8, TokenInit::kRandom, enc, 3);

    PromptEmbedder pe;
    pe.encoder = &enc;
    pe.table = &table;

    Tape tape;
    ConditioningBundle b = embed_prompt(tape, pe, "a photo of <v*>");
    REQUIRE(b.sequences.size() == 1);
    REQUIRE(b.token_positions.at(kSubjectToken) == 3);
    const Tensor& seq = b.sequences[0].value();
    REQUIRE(seq.shape == std::vector<int>{4, 8});
    for (int j = 0; j < 8; ++j)
        CHECK(seq.at2(3, j) == table.subject_embedding.data[j]);
    // all other positions equal the frozen encoder's own word embeddings
    std::vector<std::string> words = {"a", "photo", "of"};
    for (int i = 0; i < 3; ++i) {
        Tensor w = enc.word_embedding(words[i]);
        for (int j = 0; j < 8; ++j) CHECK(seq.at2(i, j) == w.data[j]);
    }

    // changing v* changes the sequence only at position 3
    TokenTable shifted = table;
    for (auto& x : shifted.subject_embedding.data) x += 0.5;
    PromptEmbedder pe2 = pe;
    pe2.table = &shifted;
    Tape tape2;
    const Tensor& seq2 = embed_prompt(tape2, pe2, "a photo of <v*>").sequences[0].value();
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 8; ++j) {
            if (i == 3)
                CHECK(seq2.at2(i, j) != seq.at2(i, j));
            else
                CHECK(seq2.at2(i, j) == seq.at2(i, j));
        }
}

TEST_CASE("embed_prompt resolves <A*> per image and errors without image_id") {
    IdentityTextEncoder enc(8);
    SubjectRecord s = make_subject(2);
    TokenTable table = register_tokens(s, 8, TokenInit::kRandom, enc, 3);
    PromptEmbedder pe;
    pe.encoder = &enc;
    pe.table = &table;

    Tape tape;
    std::string id = s.train_images[1].image;
    ConditioningBundle b = embed_prompt(tape, pe, "a photo of a dog in the <A*>", 0, id);
    int pos = b.token_positions.at(kAttractorToken);
    const Tensor& seq = b.sequences[0].value();
    const Tensor& attr = table.attractor(id);
    for (int j = 0; j < 8; ++j) CHECK(seq.at2(pos, j) == attr.data[j]);

    CHECK_THROWS_AS(embed_prompt(tape, pe, "only <A*>"), UnknownTokenError);
    CHECK_THROWS_AS(embed_prompt(tape, pe, "only <A*>", 0, "never_registered.ppm"),
                    UnknownTokenError);
}

TEST_CASE("embed_prompt rejects dimension mismatches, overlong and degenerate prompts") {
    ToyTextEncoder enc(16, 7, 8);
    SubjectRecord s = make_subject(1);
    TokenTable table = register_tokens(s, 8, TokenInit::kRandom, enc, 3);  // d != 16
    PromptEmbedder pe;
    pe.encoder = &enc;
    pe.table = &table;
    Tape tape;
    CHECK_THROWS_AS(embed_prompt(tape, pe, "a photo of <v*>"), InitError);

    TokenTable ok = register_tokens(s, 16, TokenInit::kRandom, enc, 3);
    pe.table = &ok;
    CHECK_THROWS_AS(embed_prompt(tape, pe, "a b c d e f g h i j"), ConditioningError);
    CHECK_THROWS_AS(embed_prompt(tape, pe, "<v*> meets <v*>"), ConditioningError);
    CHECK_THROWS_AS(embed_prompt(tape, pe, "   "), ConditioningError);
}

TEST_CASE("embed_prompt is a pure function of the prompt with the table fixed") {
    ToyTextEncoder enc(16, 7);
    SubjectRecord s = make_subject(2);
    TokenTable table = register_tokens(s, 16, TokenInit::kSupercategoryWord, enc, 1);
    PromptEmbedder pe;
    pe.encoder = &enc;
    pe.table = &table;

    Tape t1, t2;
    Tensor a = embed_prompt(t1, pe, "a photo of <v*>").sequences[0].value();
    Tensor b = embed_prompt(t2, pe, "a photo of <v*>").sequences[0].value();
    CHECK(same_bits(a, b));
}

TEST_CASE("gradients reach the injected subject var through the frozen encoder") {
    ToyTextEncoder enc(16, 7);
    SubjectRecord s = make_subject(1);
    TokenTable table = register_tokens(s, 16, TokenInit::kRandom, enc, 5);
    PromptEmbedder pe;
    pe.encoder = &enc;
    pe.table = &table;

    Tape tape;
    pe.subject_var = tape.leaf(table.subject_embedding);
    ConditioningBundle b = embed_prompt(tape, pe, "a photo of <v*>");
    tape.backward(tape.sum(tape.square(b.sequences[0])));
    const Tensor& g = pe.subject_var.grad();
    REQUIRE(g.size() == 16);
    double norm = 0;
    for (double x : g.data) norm += x * x;
    CHECK(norm > 0.0);
}

TEST_CASE("neti_forward: zero net emits zeros; init is deterministic; bounds checked") {
    NeTIEmbedder zero = NeTIEmbedder::constant(6, 50, 3, Tensor::zeros({6}));
    for (int t : {0, 17, 49})
        for (int l : {0, 1, 2}) {
            Tensor v = neti_forward(zero, t, l);
            REQUIRE(v.size() == 6);
            for (double x : v.data) CHECK(x == 0.0);
        }

    NeTIEmbedder e = NeTIEmbedder::init(6, 50, 3, 8, 11);
    CHECK(same_bits(neti_forward(e, 0, 0), neti_forward(e, 0, 0)));
    CHECK(same_bits(e.w1, NeTIEmbedder::init(6, 50, 3, 8, 11).w1));
    CHECK_FALSE(same_bits(neti_forward(e, 0, 0), neti_forward(e, 0, 1)));
    CHECK_FALSE(same_bits(neti_forward(e, 0, 0), neti_forward(e, 49, 0)));

    CHECK_THROWS_AS(neti_forward(e, 50, 0), IndexError);
    CHECK_THROWS_AS(neti_forward(e, -1, 0), IndexError);
    CHECK_THROWS_AS(neti_forward(e, 0, 3), IndexError);
}

TEST_CASE("neti_forward gradients match central finite differences") {
    NeTIEmbedder e = NeTIEmbedder::init(5, 40, 2, 6, 13);
    int t = 23, l = 1;

    auto loss_with = [&](const Tensor& w1v, const Tensor& b1v, const Tensor& w2v,
                         const Tensor& b2v) {
        Tape tape(false);
        NeTIParamVars p{tape.constant(w1v), tape.constant(b1v), tape.constant(w2v),
                        tape.constant(b2v)};
        Var out = neti_forward(tape, e, p, t, l);
        return tape.sum(tape.square(out)).value().data[0];
    };

    Tape tape;
    NeTIParamVars p{tape.leaf(e.w1), tape.leaf(e.b1), tape.leaf(e.w2), tape.leaf(e.b2)};
    tape.backward(tape.sum(tape.square(neti_forward(tape, e, p, t, l))));

    auto check_param = [&](Var v, const Tensor& base, int which) {
        const Tensor& g = v.grad();
        for (int64_t i = 0; i < base.size(); ++i) {
            auto f = [&](const Tensor& xv) {
                switch (which) {
                    case 0: return loss_with(xv, e.b1, e.w2, e.b2);
                    case 1: return loss_with(e.w1, xv, e.w2, e.b2);
                    case 2: return loss_with(e.w1, e.b1, xv, e.b2);
                    default: return loss_with(e.w1, e.b1, e.w2, xv);
                }
            };
            double fd = ad::finite_difference(f, base, i);
            CHECK(std::abs(fd - g.data[i]) / std::max(1.0, std::abs(fd)) < 1e-4);
        }
    };
    check_param(p.w1, e.w1, 0);
    check_param(p.b1, e.b1, 1);
    check_param(p.w2, e.w2, 2);
    check_param(p.b2, e.b2, 3);
}

TEST_CASE("NeTI sequences differ only at the v* slot across layers (identity encoder)") {
    IdentityTextEncoder enc(6);
    SubjectRecord s = make_subject(1);
    TokenTable table = register_tokens(s, 6, TokenInit::kRandom, enc, 3);
    NeTIEmbedder neti = NeTIEmbedder::init(6, 30, 3, 8, 17);

    PromptEmbedder pe;
    pe.encoder = &enc;
    pe.table = &table;
    pe.method = Method::kNeTI;
    pe.neti = &neti;

    Tape tape;
    ConditioningBundle b = embed_prompt(tape, pe, "a photo of <v*>", 12);
    REQUIRE(b.sequences.size() == 3);
    int pos = b.token_positions.at(kSubjectToken);
    const Tensor& s0 = b.sequences[0].value();
    const Tensor& s1 = b.sequences[1].value();
    REQUIRE_FALSE(same_bits(neti_forward(neti, 12, 0), neti_forward(neti, 12, 1)));
    for (int i = 0; i < b.n; ++i)
        for (int j = 0; j < 6; ++j) {
            if (i == pos)
                CHECK(s0.at2(i, j) != s1.at2(i, j));
            else
                CHECK(s0.at2(i, j) == s1.at2(i, j));
        }
}

TEST_CASE("constant NeTI reproduces TI conditioning exactly") {
    ToyTextEncoder enc(16, 7);
    SubjectRecord s = make_subject(2);
    TokenTable table = register_tokens(s, 16, TokenInit::kSupercategoryWord, enc, 1);
    NeTIEmbedder constant = NeTIEmbedder::constant(16, 25, 4, table.subject_embedding);

    PromptEmbedder ti;
    ti.encoder = &enc;
    ti.table = &table;

    PromptEmbedder neti = ti;
    neti.method = Method::kNeTI;
    neti.neti = &constant;

    Tape t1, t2;
    std::string id = s.train_images[0].image;
    Tensor a = embed_prompt(t1, ti, "a photo of <v*> in the <A*>", 0, id).sequences[0].value();
    ConditioningBundle nb = embed_prompt(t2, neti, "a photo of <v*> in the <A*>", 9, id);
    REQUIRE(nb.sequences.size() == 4);
    for (const auto& seq : nb.sequences) CHECK(same_bits(seq.value(), a));
}

TEST_CASE("extract_contextual returns the token row and honors layers") {
    ToyTextEncoder enc(16, 7);
    SubjectRecord s = make_subject(1);
    TokenTable table = register_tokens(s, 16, TokenInit::kRandom, enc, 5);
    PromptEmbedder pe;
    pe.encoder = &enc;
    pe.table = &table;

    Tape tape;
    ConditioningBundle a = embed_prompt(tape, pe, "a photo of <v*>");
    ConditioningBundle b = embed_prompt(tape, pe, "a rendering of the <v*> in the scene");
    Tensor ca = extract_contextual(a, kSubjectToken).value();
    Tensor cb = extract_contextual(b, kSubjectToken).value();
    REQUIRE(ca.size() == 16);
    // same injected v*, different context -> different contextual embeddings
    CHECK_FALSE(same_bits(ca, cb));

    CHECK_THROWS_AS(extract_contextual(a, kAttractorToken), UnknownTokenError);

    // identity encoder: single-token prompt returns the injected embedding
    IdentityTextEncoder ide(16);
    TokenTable t2 = register_tokens(s, 16, TokenInit::kRandom, ide, 5);
    PromptEmbedder pe2;
    pe2.encoder = &ide;
    pe2.table = &t2;
    Tape tape2;
    ConditioningBundle c = embed_prompt(tape2, pe2, "<v*>");
    CHECK(same_bits(extract_contextual(c, kSubjectToken).value(), t2.subject_embedding));
}

TEST_CASE("token archive round-trips bit-exactly") {
    ToyTextEncoder enc(16, 7);
    SubjectRecord s = make_subject(3);
    TokenTable table = register_tokens(s, 16, TokenInit::kRandom, enc, 9);
    NeTIEmbedder neti = NeTIEmbedder::init(16, 100, 4, 8, 21);

    Archive a = make_token_archive(table, Method::kNeTI, &neti);
    LoadedTokens lt = load_token_archive(a);
    CHECK(lt.method == Method::kNeTI);
    CHECK(lt.table.d == 16);
    CHECK(lt.table.subject_id == "subject00");
    CHECK(same_bits(lt.table.subject_embedding, table.subject_embedding));
    REQUIRE(lt.table.attractor_embeddings.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(lt.table.attractor_embeddings[i].first == table.attractor_embeddings[i].first);
        CHECK(same_bits(lt.table.attractor_embeddings[i].second,
                        table.attractor_embeddings[i].second));
    }
    REQUIRE(lt.has_neti);
    CHECK(lt.neti.T == 100);
    CHECK(lt.neti.L == 4);
    CHECK(same_bits(lt.neti.w1, neti.w1));
    CHECK(same_bits(lt.neti.b2, neti.b2));

    Archive ti = make_token_archive(table, Method::kTI);
    LoadedTokens lt2 = load_token_archive(ti);
    CHECK(lt2.method == Method::kTI);
    CHECK_FALSE(lt2.has_neti);
}

TEST_CASE("method names round-trip and reject unknowns") {
    CHECK(method_from_name("ti") == Method::kTI);
    CHECK(method_from_name("neti") == Method::kNeTI);
    CHECK(method_name(Method::kNeTI) == "neti");
    CHECK_THROWS_AS(method_from_name("dreambooth"), UsageError);
}
