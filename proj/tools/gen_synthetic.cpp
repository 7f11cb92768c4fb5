// Regenerates the bundled synthetic corpus fixture. The corpus is fully
// structured (no randomness): 8 genres x 25 users x 10 reviews, where each
// genre carries three praise aspects plus one defect aspect from the mock
// extraction lexicon. Every user prefers a pair of the genre's aspects and
// praises the overlap between their pair and each item's aspect profile, so
// user preferences and item features are separable by construction.
//
// Usage: gen_synthetic <reviews_out.jsonl> <meta_out.jsonl>

#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "revbrowse/corpus.hpp"
#include "revbrowse/extraction.hpp"

namespace corpus = revbrowse::corpus;
namespace extraction = revbrowse::extraction;

namespace {

struct Genre {
    std::string name;
    // Indices into extraction::mock_lexicon().
    std::vector<std::size_t> aspects;  // three praise aspects
    std::size_t defect;                // one defect aspect
};

const std::vector<Genre>& genres() {
    static const std::vector<Genre> table = {
        {"Snack", {0, 1, 2}, 26},      // crunch, flavor, fresh / stale
        {"Coffee", {3, 4, 5}, 29},     // aroma, roast, smooth / leaky
        {"Game", {6, 7, 8}, 27},       // story, graphics, multiplayer / buggy
        {"Headset", {9, 10, 11}, 25},  // bass, comfort, battery / noisy
        {"Backpack", {12, 13, 14}, 24},  // durable, light, grip / flimsy
        {"Planter", {15, 16, 17}, 31},   // bloom, hardy, yield / wobbly
        {"Skillet", {18, 19, 20}, 28},   // sharp, nonstick, capacity / cramped
        {"Novel", {21, 22, 23}, 30},     // prose, pacing, depth / faded
    };
    return table;
}

std::string capitalize(std::string word) {
    if (!word.empty() && word[0] >= 'a' && word[0] <= 'z') {
        word[0] = static_cast<char>(word[0] - 'a' + 'A');
    }
    return word;
}

// One sentence per aspect, using a trigger variant chosen by the user index
// so multi-trigger aspects are exercised.
std::string sentence_for(std::size_t aspect, int user_index) {
    const extraction::Aspect& a = extraction::mock_lexicon()[aspect];
    const std::string& trigger =
        a.triggers[static_cast<std::size_t>(user_index) % a.triggers.size()];
    return capitalize(trigger) + ".";
}

std::string two_digits(int n) {
    std::string s = std::to_string(n);
    return s.size() < 2 ? "0" + s : s;
}

// The aspect pair (as lexicon indices) for pair type p over a genre's three
// aspects: 0 -> {a0,a1}, 1 -> {a1,a2}, 2 -> {a0,a2}.
std::vector<std::size_t> pair_aspects(const Genre& genre, int p) {
    switch (p) {
        case 0: return {genre.aspects[0], genre.aspects[1]};
        case 1: return {genre.aspects[1], genre.aspects[2]};
        default: return {genre.aspects[0], genre.aspects[2]};
    }
}

}  // namespace

int main(int argc, char** argv) {
    if (argc != 3) {
        std::cerr << "usage: gen_synthetic <reviews_out.jsonl> <meta_out.jsonl>\n";
        return 1;
    }

    std::vector<corpus::Review> reviews;
    std::vector<corpus::ItemMeta> metas;

    for (int g = 0; g < static_cast<int>(genres().size()); ++g) {
        const Genre& genre = genres()[static_cast<std::size_t>(g)];
        // Ten normal items (aspect profile = pair type idx % 3) plus two
        // defect-plagued items per genre.
        for (int idx = 0; idx < 12; ++idx) {
            corpus::ItemMeta meta;
            meta.item_id = "item" + std::to_string(g) + "_" + two_digits(idx);
            meta.title = genre.name + " " + two_digits(idx + 1);
            metas.push_back(meta);
        }

        for (int u = 0; u < 25; ++u) {
            std::string user_id = "user" + std::to_string(g) + "_" + two_digits(u);
            int p = u % 3;
            std::vector<std::size_t> liked = pair_aspects(genre, p);

            // The held-out (last) event lands on an item whose profile equals
            // the user's pair, so preference-aligned retrieval can find it.
            std::vector<int> matching;
            for (int idx = 0; idx < 10; ++idx) {
                if (idx % 3 == p) matching.push_back(idx);
            }
            int test_idx = matching[static_cast<std::size_t>(u) % matching.size()];

            // Seven more normal items, rotating by user so coverage is even.
            std::vector<int> others;
            for (int j = 0; j < 10 && static_cast<int>(others.size()) < 7; ++j) {
                int idx = (u + j) % 10;
                if (idx != test_idx) others.push_back(idx);
            }

            // Event item order: complaints about the two defect items sit at
            // interior positions so the validation/test tail is praise.
            std::vector<int> slots = {others[0], others[1], others[2], 10,
                                      others[3], others[4], 11,       others[5],
                                      others[6], test_idx};

            for (int pos = 0; pos < 10; ++pos) {
                int idx = slots[static_cast<std::size_t>(pos)];
                corpus::Review r;
                r.user_id = user_id;
                r.item_id = "item" + std::to_string(g) + "_" + two_digits(idx);
                r.timestamp = 1390000000 + (g * 25 + u) * 86400 + pos * 3600;
                r.review_id = user_id + ":" + r.item_id;
                if (idx >= 10) {
                    r.rating = 1;
                    r.text = sentence_for(genre.defect, u);
                    r.summary = "Disappointed";
                } else {
                    r.rating = 5;
                    // Praise the overlap between the user's pair and the
                    // item's profile (pairs always overlap in >= 1 aspect).
                    std::vector<std::size_t> profile =
                        pair_aspects(genre, idx % 3);
                    std::string text;
                    for (std::size_t aspect : liked) {
                        if (aspect != profile[0] && aspect != profile[1]) continue;
                        if (!text.empty()) text += " ";
                        text += sentence_for(aspect, u);
                    }
                    r.text = text;
                    r.summary = "Loved it";
                }
                reviews.push_back(r);
            }
        }
    }

    std::ofstream reviews_out(argv[1]);
    std::ofstream meta_out(argv[2]);
    if (!reviews_out || !meta_out) {
        std::cerr << "cannot open output files\n";
        return 1;
    }
    corpus::write_canonical_reviews(reviews_out, reviews);
    corpus::write_canonical_meta(meta_out, metas);
    std::cout << "wrote " << reviews.size() << " reviews, " << metas.size() << " items\n";
    return 0;
}
