import re

from rest_framework import serializers

from .services.finetune import AGGREGATIONS, FINETUNE_MODES
from .services.pretrain import DISTILL_METRICS


class CommaSeparatedListField(serializers.ListField):
    """List field that also accepts a delimited string such as `2, 2, 2`"""

    def __init__(self, *args, delimiters=',', **kwargs):
        self.pattern = '[' + re.escape(delimiters) + ']'
        super().__init__(*args, **kwargs)

    def to_internal_value(self, data):
        if isinstance(data, str):
            data = [item.strip() for item in re.split(self.pattern, data) if item.strip()]
        return super().to_internal_value(data)


class PatchSerializer(serializers.Serializer):
    """Patch geometry: coarse length P, coarse stride S, sub-patch length SP"""
    patch_len = serializers.IntegerField(min_value=1, default=24)
    stride = serializers.IntegerField(min_value=1, default=24)
    sub_patch_len = serializers.IntegerField(min_value=1, default=6)


class EncoderSerializer(serializers.Serializer):
    layers_per_hierarchy = CommaSeparatedListField(
        child=serializers.IntegerField(min_value=1), min_length=1, delimiters=',-', default=[2, 2, 2]
    )
    heads = serializers.IntegerField(min_value=1, default=4)
    d_model = serializers.IntegerField(min_value=1, default=128)
    d_ff = serializers.IntegerField(min_value=1, default=256)
    dropout = serializers.FloatField(min_value=0.0, max_value=0.99, default=0.1)

    def validate(self, attrs):
        if attrs['d_model'] % attrs['heads']:
            raise serializers.ValidationError(
                f"d_model={attrs['d_model']} is not divisible by heads={attrs['heads']}"
            )
        return attrs


class PretrainSerializer(serializers.Serializer):
    mask_ratio = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.5)
    alpha = serializers.FloatField(min_value=0.0, default=1.0)
    beta = serializers.FloatField(min_value=0.0, default=1.0)
    epochs = serializers.IntegerField(min_value=0, default=10)
    batch_size = serializers.IntegerField(min_value=1, default=64)
    lr = serializers.FloatField(min_value=0.0, default=1e-4)
    seed = serializers.IntegerField(min_value=0, required=False, allow_null=True, default=None)
    use_hsd = serializers.BooleanField(default=True)
    use_ded = serializers.BooleanField(default=True)
    distill_metric = serializers.ChoiceField(choices=DISTILL_METRICS, default='smooth_l1')
    detach_decoder_input = serializers.BooleanField(default=False)
    loss_threshold = serializers.FloatField(min_value=1e-12, default=1.0)

    def validate_mask_ratio(self, value):
        if not 0.0 < value < 1.0:
            raise serializers.ValidationError("mask ratio must lie strictly between 0 and 1")
        return value


class FinetuneSerializer(serializers.Serializer):
    horizon = serializers.IntegerField(min_value=1, default=96)
    lr = serializers.FloatField(min_value=0.0, default=1e-4)
    epochs = serializers.IntegerField(min_value=0, default=10)
    batch_size = serializers.IntegerField(min_value=1, default=64)
    seed = serializers.IntegerField(min_value=0, required=False, allow_null=True, default=None)
    mode = serializers.ChoiceField(choices=FINETUNE_MODES, default='full')
    use_csa = serializers.BooleanField(default=True)
    aggregation = serializers.ChoiceField(choices=AGGREGATIONS, default='mean')
    loss_threshold = serializers.FloatField(min_value=1e-12, default=1.0)
    naive_period = serializers.IntegerField(min_value=1, default=24)


class DataSerializer(serializers.Serializer):
    csv_path = serializers.CharField(required=False, allow_null=True, allow_blank=True, default=None)
    timestamp_column = serializers.CharField(required=False, allow_null=True, allow_blank=True, default=None)
    columns = CommaSeparatedListField(child=serializers.CharField(), default=[])
    splits = CommaSeparatedListField(
        child=serializers.FloatField(min_value=0.0), min_length=3, max_length=3, default=[0.6, 0.2, 0.2]
    )
    lookback = serializers.IntegerField(min_value=1, default=512)
    stride = serializers.IntegerField(min_value=1, default=1)

    def validate_splits(self, value):
        if abs(sum(value) - 1.0) > 1e-9:
            raise serializers.ValidationError(f"split fractions must sum to 1, got {sum(value)}")
        return value


class SyntheticSerializer(serializers.Serializer):
    """`sinusoids` items are `period:amplitude:phase`"""
    length = serializers.IntegerField(min_value=1, default=4000)
    channels = serializers.IntegerField(min_value=1, default=1)
    sinusoids = CommaSeparatedListField(child=serializers.CharField(), default=['24:1:0', '168:0.5:0'])
    trend = serializers.FloatField(default=0.0)
    noise = serializers.FloatField(min_value=0.0, default=0.1)
    seed = serializers.IntegerField(min_value=0, default=0)

    def validate_sinusoids(self, value):
        components = []
        for item in value:
            parts = item.split(':')
            if len(parts) != 3:
                raise serializers.ValidationError(f"'{item}' is not period:amplitude:phase")
            try:
                period, amplitude, phase = (float(p) for p in parts)
            except ValueError:
                raise serializers.ValidationError(f"'{item}' contains a non-numeric component")
            if period <= 0:
                raise serializers.ValidationError(f"period must be positive in '{item}'")
            components.append((period, amplitude, phase))
        return tuple(components)


class RunSerializer(serializers.Serializer):
    seed = serializers.IntegerField(min_value=0, default=0)
    output_dir = serializers.CharField(required=False, allow_null=True, allow_blank=True, default=None)


SECTION_SERIALIZERS = {
    'run': RunSerializer,
    'patch': PatchSerializer,
    'encoder': EncoderSerializer,
    'pretrain': PretrainSerializer,
    'finetune': FinetuneSerializer,
    'data': DataSerializer,
    'synthetic': SyntheticSerializer,
}
