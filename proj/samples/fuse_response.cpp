// Parse a judge response from stdin and print the fused overall label under
// each policy.
//
//   echo '{"content":"1","voice_quality":"both_good","instruction_following_audio":"2"}' | ./fuse_response

#include <iostream>
#include <iterator>
#include <string>

#include "trace/fusion.hpp"
#include "trace/judge.hpp"

int main() {
  const std::string raw{std::istreambuf_iterator<char>(std::cin), {}};
  try {
    const auto d = trace::judge::parse_decisions(raw);
    std::cout << "content=" << trace::to_string(d.content) << " voice_quality=" << trace::to_string(d.voice_quality)
              << " paralinguistics=" << trace::to_string(d.paralinguistics) << "\n";
    for (auto p : {trace::fusion::Policy::speakbench_tree, trace::fusion::Policy::s2s_arena_cap,
                   trace::fusion::Policy::majority_vote})
      std::cout << trace::fusion::to_string(p) << ": " << trace::to_string(trace::fusion::fuse(p, d)) << "\n";
  } catch (const trace::CodedError& e) {
    std::cerr << e.code() << ": " << e.detail() << "\n";
    return 1;
  }
}
