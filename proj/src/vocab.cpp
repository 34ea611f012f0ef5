#include "vaenar/vocab.hpp"

namespace vaenar {

int vocab_table_size() { return static_cast<int>(kSymbolTable.size()); }

std::vector<int> text_to_ids(const std::string& text, int vocab_size) {
    if (vocab_size < 1 || vocab_size > vocab_table_size())
        throw ConfigError("vocab_size must be in [1, " + std::to_string(vocab_table_size()) + "]");
    if (text.empty()) throw VocabError("empty text");
    std::vector<int> ids;
    ids.reserve(text.size());
    std::string bad;
    for (char ch : text) {
        auto pos = kSymbolTable.substr(0, static_cast<std::size_t>(vocab_size)).find(ch);
        if (pos == std::string::npos) {
            if (bad.find(ch) == std::string::npos) bad.push_back(ch);
            continue;
        }
        ids.push_back(static_cast<int>(pos));
    }
    if (!bad.empty()) throw VocabError("unknown symbols: '" + bad + "'");
    return ids;
}

std::string ids_to_text(const std::vector<int>& ids) {
    std::string s;
    s.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= vocab_table_size()) throw VocabError("symbol id out of range");
        s.push_back(kSymbolTable[static_cast<std::size_t>(id)]);
    }
    return s;
}

}  // namespace vaenar
