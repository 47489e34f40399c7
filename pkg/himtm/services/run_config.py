"""
Run configuration: parsing, validation and the config echo

File format: one `section.key = value` per line, `#` starts a comment, lists
are comma separated. Every section is validated by its serializer in
himtm.serializers; the validated values build the frozen dataclasses used by
the services.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional

from ..exceptions import ConfigurationError, InputTooShortError
from .data import DatasetSpec, SyntheticRecipe
from .finetune import FinetuneConfig
from .hmt_encoder import EncoderConfig
from .patching import PatchSpec, masked_count
from .pretrain import PretrainConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    patch: PatchSpec = field(default_factory=PatchSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    seed: int = 0
    output_dir: Optional[str] = None

    def __post_init__(self):
        if self.patch.hierarchies != self.encoder.hierarchies:
            raise ConfigurationError(
                f"patch geometry gives {self.patch.hierarchies} hierarchies (P/SP={self.patch.n_sub}) "
                f"but encoder.layers_per_hierarchy lists {self.encoder.hierarchies}"
            )
        if self.data.lookback < self.patch.patch_len:
            raise InputTooShortError(
                f"data.lookback={self.data.lookback} is shorter than patch.patch_len={self.patch.patch_len}"
            )
        n_coarse = self.patch.n_coarse(self.data.lookback)
        hidden = masked_count(self.pretrain.mask_ratio, n_coarse)
        if hidden == 0:
            raise ConfigurationError(
                f"pretrain.mask_ratio={self.pretrain.mask_ratio} masks none of the {n_coarse} coarse patches "
                f"per window: the mask ratio is too low for data.lookback={self.data.lookback}"
            )
        if hidden == n_coarse:
            raise ConfigurationError(
                f"pretrain.mask_ratio={self.pretrain.mask_ratio} masks all {n_coarse} coarse patches "
                f"per window: the mask ratio is too high for data.lookback={self.data.lookback}"
            )

    def sections(self) -> Dict[str, object]:
        return {
            'run': self,
            'patch': self.patch,
            'encoder': self.encoder,
            'pretrain': self.pretrain,
            'finetune': self.finetune,
            'data': self.data,
            'synthetic': self.data.synthetic,
        }

    def echo(self) -> str:
        """Render every setting in the file format; parse_config_text(echo()) == self"""
        from ..serializers import SECTION_SERIALIZERS

        lines = []
        for section, serializer_class in SECTION_SERIALIZERS.items():
            source = self.sections()[section]
            for name in serializer_class().fields:
                value = getattr(source, name)
                if value is None or value == '':
                    continue
                lines.append(f"{section}.{name} = {_render(value)}")
        return '\n'.join(lines) + '\n'

    def with_overrides(self, overrides: Mapping[str, str]) -> 'RunConfig':
        return parse_config_text(self.echo(), overrides)


def _render(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        if value and isinstance(value[0], (list, tuple)):
            return ', '.join(':'.join(_render(part) for part in item) for item in value)
        return ', '.join(_render(item) for item in value)
    return str(value)


def parse_sections(text: str, origin: str = '<config>') -> Dict[str, Dict[str, str]]:
    from ..serializers import SECTION_SERIALIZERS

    sections: Dict[str, Dict[str, str]] = {name: {} for name in SECTION_SERIALIZERS}
    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split('#', 1)[0].strip()
        if not content:
            continue
        if '=' not in content:
            raise ConfigurationError(f"{origin}, line {number}: expected 'section.key = value', got '{content}'")
        key, _, value = content.partition('=')
        section, name = _split_key(key.strip(), f"{origin}, line {number}")
        if name in sections[section]:
            raise ConfigurationError(f"{origin}, line {number}: '{section}.{name}' is set twice")
        sections[section][name] = value.strip()
    return sections


def _split_key(key: str, where: str):
    from ..serializers import SECTION_SERIALIZERS

    section, _, name = key.partition('.')
    if section not in SECTION_SERIALIZERS or not name:
        raise ConfigurationError(f"{where}: unknown configuration key '{key}'")
    if name not in SECTION_SERIALIZERS[section]().fields:
        raise ConfigurationError(f"{where}: unknown configuration key '{key}'")
    return section, name


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    """`key=value` strings (from --set) to a mapping"""
    overrides = {}
    for pair in pairs or ():
        if '=' not in pair:
            raise ConfigurationError(f"override '{pair}' is not key=value")
        key, _, value = pair.partition('=')
        overrides[key.strip()] = value.strip()
    return overrides


def parse_config_text(text: str, overrides: Optional[Mapping[str, str]] = None, origin: str = '<config>') -> RunConfig:
    from ..serializers import SECTION_SERIALIZERS

    raw = parse_sections(text, origin)
    for key, value in (overrides or {}).items():
        section, name = _split_key(key, 'override')
        raw[section][name] = value

    validated = {}
    for section, serializer_class in SECTION_SERIALIZERS.items():
        data = {name: value for name, value in raw[section].items() if value != ''}
        serializer = serializer_class(data=data)
        if not serializer.is_valid():
            raise ConfigurationError(_first_error(section, serializer.errors))
        validated[section] = dict(serializer.validated_data)

    run = validated['run']
    data = validated['data']
    synthetic = validated['synthetic']
    encoder = validated['encoder']
    return RunConfig(
        patch=PatchSpec(**validated['patch']),
        encoder=EncoderConfig(**dict(encoder, layers_per_hierarchy=tuple(encoder['layers_per_hierarchy']))),
        pretrain=PretrainConfig(**validated['pretrain']),
        finetune=FinetuneConfig(**validated['finetune']),
        data=DatasetSpec(
            csv_path=data['csv_path'] or None,
            timestamp_column=data['timestamp_column'] or None,
            columns=tuple(data['columns']),
            splits=tuple(data['splits']),
            lookback=data['lookback'],
            stride=data['stride'],
            synthetic=SyntheticRecipe(**dict(synthetic, sinusoids=tuple(synthetic['sinusoids']))),
        ),
        seed=run['seed'],
        output_dir=run['output_dir'] or None,
    )


def _first_error(section: str, errors: Mapping[str, List]) -> str:
    name, messages = next(iter(errors.items()))
    message = messages[0] if isinstance(messages, list) and messages else messages
    if isinstance(message, dict):
        message = next(iter(message.values()))
        message = message[0] if isinstance(message, list) else message
    if name == 'non_field_errors':
        return f"{section}: {message}"
    return f"{section}.{name}: {message}"


def load_config(path, overrides: Optional[Mapping[str, str]] = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e.strerror or str(e)}") from None
    config = parse_config_text(text, overrides, origin=str(path))
    logger.debug(f"configuration loaded from {path}")
    return config
