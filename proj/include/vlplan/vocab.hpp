#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "vlplan/error.hpp"

namespace vlplan {

// Word-level text vocabulary. Fixed word list plus per-grid coordinate
// tokens (r0..r{G-1}, c0..c{G-1}); everything the prompt templates, task
// instructions and the action grammar emit is covered, nothing else.
class Vocab {
public:
    static constexpr const char* kPad = "<pad>";
    static constexpr const char* kEndOfAction = "<eoa>";
    static constexpr const char* kImgOpen = "<img>";
    static constexpr const char* kImgClose = "</img>";
    static constexpr const char* kImageHere = "<imagehere>";
    static constexpr const char* kActionHere = "<actionhere>";
    static constexpr const char* kTaskHere = "<taskhere>";

    explicit Vocab(int grid = 8) : grid_(grid) {
        static const char* words[] = {
            kPad, kEndOfAction, kImgOpen, kImgClose, kImageHere, kActionHere, kTaskHere,
            // prompt templates
            "what", "is", "the", "action", "between", "and", "please", "infer", "actions",
            "that", "took", "place", "will", "happen", "if", "takes", "like", "an", "image",
            "of", "next", "state", "you", "are", "given", "current", "observation", "task",
            "instruction", "make", "step", "decision", "generate",
            "?", ".", ":",
            // action grammar and instructions
            "move", "block", "at", "to", "all", "blocks", "area", "left", "right", "top",
            "bottom", "stack", "in", "column", "put", "bowls", "with", "matching", "colors",
            // colors
            "red", "green", "blue", "yellow", "orange", "purple",
        };
        for (const char* w : words) add(w);
        for (int r = 0; r < grid_; ++r) add("r" + std::to_string(r));
        for (int c = 0; c < grid_; ++c) add("c" + std::to_string(c));
    }

    int size() const { return static_cast<int>(id_to_word_.size()); }
    int grid() const { return grid_; }

    int id(const std::string& word) const {
        auto it = word_to_id_.find(word);
        require(it != word_to_id_.end(), ErrorKind::InvalidToken, "unknown word: " + word);
        return it->second;
    }

    bool contains(const std::string& word) const { return word_to_id_.count(word) != 0; }

    const std::string& word(int id) const {
        require(id >= 0 && id < size(), ErrorKind::InvalidToken,
                "token id out of range: " + std::to_string(id));
        return id_to_word_[static_cast<std::size_t>(id)];
    }

    int row_token(int r) const { return id("r" + std::to_string(r)); }
    int col_token(int c) const { return id("c" + std::to_string(c)); }
    int eoa() const { return id(kEndOfAction); }
    int img_open() const { return id(kImgOpen); }
    int img_close() const { return id(kImgClose); }

    // Whitespace-split encoding; every word must be in vocabulary.
    std::vector<int> encode(const std::string& text) const {
        std::vector<int> out;
        std::size_t i = 0;
        while (i < text.size()) {
            while (i < text.size() && text[i] == ' ') ++i;
            std::size_t j = i;
            while (j < text.size() && text[j] != ' ') ++j;
            if (j > i) out.push_back(id(text.substr(i, j - i)));
            i = j;
        }
        return out;
    }

    std::string decode(const std::vector<int>& tokens) const {
        std::string out;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (i) out += ' ';
            out += word(tokens[i]);
        }
        return out;
    }

private:
    void add(const std::string& w) {
        word_to_id_.emplace(w, static_cast<int>(id_to_word_.size()));
        id_to_word_.push_back(w);
    }

    int grid_;
    std::vector<std::string> id_to_word_;
    std::unordered_map<std::string, int> word_to_id_;
};

}  // namespace vlplan
