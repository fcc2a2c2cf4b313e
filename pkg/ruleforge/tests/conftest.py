from pathlib import Path
from typing import List, Sequence

import pytest

from ruleforge.services.models import Prompt
from ruleforge.services.validator_service import RuleValidator
from ruleforge.tests.corpus_builder import build_fixture_corpus

BASE_YARA = r'''rule pypi_hostinfo_stealer : stealer
{
    meta:
        description = "collects host details and posts them"
        author = "ruleforge"
        version = 2
        reviewed = true
    strings:
        $host = "socket.gethostname" ascii
        $user = "getpass.getuser" nocase
        $post = /requests\.post\(/
        $hex = { 73 6F 63 6B ?? 74 }
    condition:
        2 of ($host, $user, $post) and #hex >= 0 and filesize < 2MB
}
'''

BASE_SEMGREP = '''rules:
  - id: hostinfo-post
    message: host details posted to a remote collector
    languages: [python]
    severity: WARNING
    patterns:
      - pattern: requests.post(...)
      - pattern-inside: |
          def $F(...):
            ...
'''


class ScriptedBackend:
    """Answers prompts from a fixed list (the last answer repeats) and keeps every prompt."""

    backend_id = "scripted"

    def __init__(self, responses: Sequence[str]):
        self.responses = list(responses)
        self.prompts: List[Prompt] = []

    def generate(self, prompt: Prompt) -> str:
        self.prompts.append(prompt)
        index = min(len(self.prompts), len(self.responses)) - 1
        return self.responses[index]


@pytest.fixture
def validator() -> RuleValidator:
    return RuleValidator()


@pytest.fixture
def fixture_corpus(tmp_path: Path):
    return build_fixture_corpus(tmp_path / "corpus")
